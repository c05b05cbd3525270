"""Charts and retractions.

Configuration manifolds are handled in a single global chart ``R^n``.  A
retraction is represented by its local inverse ``tau(q, Q)``, the tangent
vector at the base point ``q`` that reaches ``Q`` (base point first).  The
identification only has to be a diffeomorphism near the diagonal; what the
doubled constructions actually use is

    tau(q, q) = 0,   d2_tau(q, q) = I,   d1_tau(q, q) = -I.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ViolationFound


@dataclass(frozen=True)
class Chart:
    """Global chart on ``R^n``; ``periodic_mask`` marks angle coordinates."""

    dim: int
    periodic_mask: tuple[bool, ...] = ()

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError("chart dimension must be >= 1")
        mask = tuple(bool(b) for b in self.periodic_mask) or (False,) * self.dim
        if len(mask) != self.dim:
            raise ValueError("periodic_mask length must equal dim")
        object.__setattr__(self, "periodic_mask", mask)

    def check(self, x, name: str = "point") -> np.ndarray:
        """Validate a point/vector/covector against this chart."""
        arr = np.asarray(x, dtype=float)
        if arr.shape != (self.dim,):
            raise ValueError(f"{name} must have shape ({self.dim},), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} has non-finite entries")
        return arr

    def wrap(self, q) -> np.ndarray:
        """Map periodic coordinates to [-pi, pi) for display; dynamics never use this."""
        q = np.array(q, dtype=float)
        mask = np.array(self.periodic_mask)
        if mask.any():
            q[..., mask] = (q[..., mask] + np.pi) % (2 * np.pi) - np.pi
        return q


@dataclass(frozen=True)
class Retraction:
    """Inverse retraction ``tau`` with closed-form partial derivatives.

    ``tau`` must accept coordinate-first arrays and :class:`~forcedvi.autodiff.Dual`
    values; ``d1_tau``/``d2_tau`` return the ``n x n`` Jacobians with respect to
    the first and second argument at plain numeric points.
    """

    tau: Callable
    d1_tau: Callable
    d2_tau: Callable
    name: str = "custom"


def euclidean_retraction(chart: Chart) -> Retraction:
    """``tau(q, Q) = Q - q`` with constant derivatives ``-I`` and ``I``."""
    n = chart.dim
    eye = np.eye(n)

    def tau(q, Q):
        return Q - q

    return Retraction(
        tau=tau,
        d1_tau=lambda q, Q: -eye.copy(),
        d2_tau=lambda q, Q: eye.copy(),
        name="euclidean",
    )


@dataclass
class RetractionReport:
    """Largest violation found for each checked identity."""

    violations: dict[str, float] = field(default_factory=dict)
    tol: float = 0.0

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.violations.values())


def check_retraction_axioms(
    r: Retraction, samples: Sequence, tol: float = 1e-12
) -> RetractionReport:
    """Check the retraction identities at coincident points.

    Checked, in order: ``tau(q, q) = 0``, ``d2_tau(q, q) = I``,
    ``d1_tau(q, q) = -I``, and agreement of the supplied closed-form
    derivatives with automatic differentiation of ``tau`` (``d1_tau_ad``,
    ``d2_tau_ad``, evaluated at off-diagonal sample pairs too).

    Raises:
        ViolationFound: for the first identity whose worst violation exceeds ``tol``.
    """
    pts = [np.asarray(q, dtype=float) for q in samples]
    if not pts:
        raise ValueError("need at least one sample point")
    n = pts[0].size
    eye = np.eye(n)
    worst = {"tau": 0.0, "d2_tau": 0.0, "d1_tau": 0.0, "d1_tau_ad": 0.0, "d2_tau_ad": 0.0}

    pairs = [(q, q) for q in pts] + list(zip(pts, pts[1:] + pts[:1]))
    for q in pts:
        worst["tau"] = max(worst["tau"], float(np.max(np.abs(np.asarray(r.tau(q, q))))))
        worst["d2_tau"] = max(worst["d2_tau"], float(np.max(np.abs(r.d2_tau(q, q) - eye))))
        worst["d1_tau"] = max(worst["d1_tau"], float(np.max(np.abs(r.d1_tau(q, q) + eye))))
    for q, Q in pairs:
        j1 = ad.jacobian(lambda x: r.tau(x, Q), q)
        j2 = ad.jacobian(lambda x: r.tau(q, x), Q)
        worst["d1_tau_ad"] = max(worst["d1_tau_ad"], float(np.max(np.abs(j1 - r.d1_tau(q, Q)))))
        worst["d2_tau_ad"] = max(worst["d2_tau_ad"], float(np.max(np.abs(j2 - r.d2_tau(q, Q)))))

    report = RetractionReport(worst, tol)
    for symbol, mag in worst.items():
        if mag > tol:
            raise ViolationFound(symbol, mag)
    return report
