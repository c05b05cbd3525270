"""Forced Lagrangian systems and their doubled (duplicated-variable) counterparts.

A forced system is a Lagrangian ``L(q, v)`` together with an external force
``F(q, v)`` (a covector at ``q``).  Duplicating the configuration to
``(q, Q)`` and adding the antisymmetric potential

    K(q, v, Q, V) = 1/2 <F(Q, V), tau(Q, q)> - 1/2 <F(q, v), tau(q, Q)>

gives an unforced Lagrangian ``L(Q, V) - L(q, v) - K`` on ``TQ x TQ`` whose
Euler-Lagrange flow leaves the diagonal ``q = Q, v = V`` invariant and
reproduces the forced dynamics there.  The Hamiltonian side mirrors this with
``H(beta) - H(alpha) + K_F``.

All derivatives come from :mod:`forcedvi.autodiff`.  User callables receive
coordinate-first arrays or Duals (``q[i]`` is coordinate ``i``) and must
broadcast over any trailing axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .errors import LegendreInversionFailed, NonFinite, SingularMass
from .geometry import Chart, Retraction, euclidean_retraction
from .trajectory import TrajectoryRecord

COND_LIMIT = 1e12


def _zero_force(q, v):
    return 0.0 * v


@dataclass(frozen=True)
class ForcedSystem:
    """Lagrangian ``L(q, v)`` with external force ``F(q, v)`` on a chart."""

    chart: Chart
    lagrangian: Callable
    force: Callable | None = None
    retraction: Retraction | None = None
    name: str = "system"

    def __post_init__(self):
        if self.force is None:
            object.__setattr__(self, "force", _zero_force)
        if self.retraction is None:
            object.__setattr__(self, "retraction", euclidean_retraction(self.chart))

    @property
    def dim(self) -> int:
        return self.chart.dim

    def unforced(self) -> "ForcedSystem":
        """Same Lagrangian with ``F = 0``."""
        return ForcedSystem(self.chart, self.lagrangian, None, self.retraction, self.name + "-unforced")

    # raw (Dual-compatible) building blocks --------------------------------
    def potential_K(self, q, v, Q, V):
        tau = self.retraction.tau
        F = self.force
        return 0.5 * ad.dot(F(Q, V), tau(Q, q)) - 0.5 * ad.dot(F(q, v), tau(q, Q))

    def doubled_L(self, q, v, Q, V):
        L = self.lagrangian
        return L(Q, V) - L(q, v) - self.potential_K(q, v, Q, V)

    def blocks(self, q, v):
        """Value, gradient and Hessian of ``L`` in ``(q, v)`` ordering."""
        n = self.dim
        return ad.value_grad_hess(lambda x: self.lagrangian(x[:n], x[n:]), np.concatenate([q, v]))


@dataclass(frozen=True)
class StateTangent:
    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        if self.q.shape != self.v.shape:
            raise ValueError("q and v dimension mismatch")


@dataclass(frozen=True)
class StateCotangent:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))
        if self.q.shape != self.p.shape:
            raise ValueError("q and p dimension mismatch")


@dataclass(frozen=True)
class DoubledStateTangent:
    """Point ``(q, v; Q, V)`` of ``TQ x TQ``."""

    minus: StateTangent
    plus: StateTangent

    def __post_init__(self):
        if self.minus.q.shape != self.plus.q.shape:
            raise ValueError("both halves must live on the same chart")

    @classmethod
    def from_arrays(cls, q, v, Q, V) -> "DoubledStateTangent":
        return cls(StateTangent(q, v), StateTangent(Q, V))

    @classmethod
    def identity(cls, s: StateTangent) -> "DoubledStateTangent":
        return cls(s, s)

    def swapped(self) -> "DoubledStateTangent":
        return DoubledStateTangent(self.plus, self.minus)

    def identity_defect(self) -> float:
        return float(
            np.linalg.norm(self.minus.q - self.plus.q) + np.linalg.norm(self.minus.v - self.plus.v)
        )

    def on_identities(self, tol: float = 0.0) -> bool:
        return self.identity_defect() <= tol

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.minus.q, self.minus.v, self.plus.q, self.plus.v])


class DoubledTangent(NamedTuple):
    """Tangent vector to ``TQ x TQ`` (time derivatives of q, v, Q, V)."""

    dq: np.ndarray
    dv: np.ndarray
    dQ: np.ndarray
    dV: np.ndarray


class DoubledCotangentTangent(NamedTuple):
    """Tangent vector to ``T*Q x T*Q`` (time derivatives of q, p, Q, P)."""

    dq: np.ndarray
    dp: np.ndarray
    dQ: np.ndarray
    dP: np.ndarray


@dataclass(frozen=True)
class EnergyReport:
    E_L: float
    t: float = 0.0


# ---------------------------------------------------------------------------
# single-system quantities


def _check_mass(W: np.ndarray) -> None:
    cond = np.linalg.cond(W)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularMass(cond)


def _acceleration(sys: ForcedSystem, q: np.ndarray, v: np.ndarray) -> np.ndarray:
    n = sys.dim
    _, g, H = sys.blocks(q, v)
    W = H[n:, n:]
    _check_mass(W)
    rhs = np.asarray(sys.force(q, v), dtype=float) + g[:n] - H[n:, :n] @ v
    return np.linalg.solve(W, rhs)


def forced_el_acceleration(sys: ForcedSystem, s: StateTangent) -> np.ndarray:
    """Acceleration solving ``d/dt dL/dv - dL/dq = F`` at ``(q, v)``.

    ``a = W^{-1} (F + dL/dq - (d2L/dv dq) v)`` with ``W`` the velocity Hessian.

    Raises:
        SingularMass: if ``W`` has condition number above ``COND_LIMIT``.
    """
    return _acceleration(sys, sys.chart.check(s.q, "q"), sys.chart.check(s.v, "v"))


def energy(sys: ForcedSystem, s: StateTangent, t: float = 0.0) -> EnergyReport:
    """``E_L = v . dL/dv - L``."""
    n = sys.dim
    val, g, _ = ad.value_grad_hess(lambda x: sys.lagrangian(x[:n], x[n:]), np.concatenate([s.q, s.v]))
    return EnergyReport(float(s.v @ g[n:] - val), t)


def energy_value(sys: ForcedSystem, q: np.ndarray, v: np.ndarray) -> float:
    n = sys.dim
    g = ad.gradient(lambda x: sys.lagrangian(x[:n], x[n:]), np.concatenate([q, v]))
    val = float(ad.value_of(sys.lagrangian(q, v)))
    return float(v @ g[n:] - val)


def legendre(sys: ForcedSystem, s: StateTangent) -> StateCotangent:
    """Fibre derivative ``p = dL/dv``."""
    q = np.asarray(s.q, dtype=float)
    p = ad.gradient(lambda v: sys.lagrangian(q, v), s.v)
    return StateCotangent(q, p)


def legendre_inverse(
    sys: ForcedSystem, q, p, tol: float = 1e-13, max_iters: int = 50
) -> np.ndarray:
    """Velocity ``v`` with ``dL/dv(q, v) = p`` (Newton, seeded with ``M^{-1} p``)."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)

    def vgh(v):
        try:
            _, g, H = ad.value_grad_hess(lambda x: sys.lagrangian(q, x), v)
        except NonFinite as exc:
            raise LegendreInversionFailed("Newton left the domain of L") from exc
        return g, H

    g0, M = vgh(np.zeros_like(p))
    try:
        v = np.linalg.solve(M, p - g0)
    except np.linalg.LinAlgError as exc:
        raise LegendreInversionFailed("singular mass matrix at v = 0") from exc
    scale = 1.0 + np.max(np.abs(p))
    for _ in range(max_iters):
        g, W = vgh(v)
        r = g - p
        try:
            dv = np.linalg.solve(W, r)
        except np.linalg.LinAlgError as exc:
            raise LegendreInversionFailed("singular velocity Hessian") from exc
        v = v - dv
        if np.max(np.abs(r)) <= tol * scale:
            return v
    raise LegendreInversionFailed(f"no convergence, residual {np.max(np.abs(r)):.3e}")


def _legendre_inverse_dual(sys: ForcedSystem, q, p):
    """Legendre inverse that propagates first-order Dual seeds (implicit function rule)."""
    qv, pv = ad.value_of(q), ad.value_of(p)
    v0 = legendre_inverse(sys, qv, pv)
    if not isinstance(q, ad.Dual) and not isinstance(p, ad.Dual):
        return v0
    n = sys.dim
    _, _, H = sys.blocks(qv, v0)
    W, Lvq = H[n:, n:], H[n:, :n]
    m = (q if isinstance(q, ad.Dual) else p).nvars
    qg = q.grad if isinstance(q, ad.Dual) else np.zeros((n, m))
    pg = p.grad if isinstance(p, ad.Dual) else np.zeros((n, m))
    return ad.Dual(v0, np.linalg.solve(W, pg - Lvq @ qg))


def hamiltonian(sys: ForcedSystem, sc: StateCotangent) -> float:
    """``H(q, p) = p . v - L(q, v)`` with ``v`` from the inverse Legendre map."""
    v = legendre_inverse(sys, sc.q, sc.p)
    return float(sc.p @ v - ad.value_of(sys.lagrangian(sc.q, v)))


def _hamiltonian_raw(sys: ForcedSystem, q, p):
    v = _legendre_inverse_dual(sys, q, p)
    return ad.dot(p, v) - sys.lagrangian(q, v), v


def forced_hamilton_field(sys: ForcedSystem, sc: StateCotangent) -> tuple[np.ndarray, np.ndarray]:
    """Forced Hamilton equations ``(dH/dp, -dH/dq + F^H)`` at ``(q, p)``."""
    q = sys.chart.check(sc.q, "q")
    v = legendre_inverse(sys, q, sc.p)
    n = sys.dim
    g = ad.gradient(lambda x: sys.lagrangian(x[:n], x[n:]), np.concatenate([q, v]))
    # -dH/dq equals dL/dq at corresponding points
    return v, g[:n] + np.asarray(sys.force(q, v), dtype=float)


# ---------------------------------------------------------------------------
# doubled quantities


def generalized_potential_KF(sys: ForcedSystem, d: DoubledStateTangent) -> float:
    """Antisymmetric potential on ``TQ x TQ`` built from ``F`` and ``tau``."""
    return float(ad.value_of(sys.potential_K(d.minus.q, d.minus.v, d.plus.q, d.plus.v)))


def doubled_lagrangian(sys: ForcedSystem, d: DoubledStateTangent) -> float:
    """``L(Q, V) - L(q, v) - K(q, v, Q, V)``."""
    return float(ad.value_of(sys.doubled_L(d.minus.q, d.minus.v, d.plus.q, d.plus.v)))


def _hamiltonian_potential_raw(sys: ForcedSystem, q, vq, Q, vQ):
    tau = sys.retraction.tau
    return 0.5 * ad.dot(sys.force(Q, vQ), tau(Q, q)) - 0.5 * ad.dot(sys.force(q, vq), tau(q, Q))


def _doubled_hamiltonian_raw(sys: ForcedSystem, q, p, Q, P):
    h_minus, v = _hamiltonian_raw(sys, q, p)
    h_plus, V = _hamiltonian_raw(sys, Q, P)
    # F^H(q, p) = F(q, v(q, p))
    return h_plus - h_minus + _hamiltonian_potential_raw(sys, q, v, Q, V)


def doubled_hamiltonian(sys: ForcedSystem, alpha: StateCotangent, beta: StateCotangent) -> float:
    """``H(beta) - H(alpha) + K_F(alpha, beta)``.

    Raises:
        LegendreInversionFailed: if either momentum cannot be mapped back to a velocity.
    """
    return float(ad.value_of(_doubled_hamiltonian_raw(sys, alpha.q, alpha.p, beta.q, beta.p)))


def _split_doubled_hessian(sys: ForcedSystem, z: np.ndarray):
    n = sys.dim
    _, g, H = ad.value_grad_hess(
        lambda x: sys.doubled_L(x[:n], x[n : 2 * n], x[2 * n : 3 * n], x[3 * n :]), z
    )
    pos = np.r_[0:n, 2 * n : 3 * n]
    vel = np.r_[n : 2 * n, 3 * n : 4 * n]
    return g[pos], H[np.ix_(vel, vel)], H[np.ix_(vel, pos)]


def doubled_field(sys: ForcedSystem, d: DoubledStateTangent) -> DoubledTangent:
    """Euler-Lagrange vector field of the doubled Lagrangian at ``d``.

    Computed from the doubled Lagrangian alone; the force enters only
    through the generalized potential.

    Raises:
        SingularMass: if the doubled velocity Hessian is singular.
    """
    n = sys.dim
    z = d.as_vector()
    gx, Wb, Cb = _split_doubled_hessian(sys, z)
    _check_mass(Wb)
    xdot = np.concatenate([d.minus.v, d.plus.v])
    acc = np.linalg.solve(Wb, gx - Cb @ xdot)
    return DoubledTangent(d.minus.v.copy(), acc[:n], d.plus.v.copy(), acc[n:])


def doubled_hamiltonian_field(
    sys: ForcedSystem, alpha: StateCotangent, beta: StateCotangent
) -> DoubledCotangentTangent:
    """Hamiltonian vector field of ``H(beta) - H(alpha) + K_F`` for the product
    symplectic form ``pr2* omega - pr1* omega``."""
    n = sys.dim
    z = np.concatenate([alpha.q, alpha.p, beta.q, beta.p])
    g = ad.gradient(
        lambda x: _doubled_hamiltonian_raw(sys, x[:n], x[n : 2 * n], x[2 * n : 3 * n], x[3 * n :]), z
    )
    dHq, dHp, dHQ, dHP = g[:n], g[n : 2 * n], g[2 * n : 3 * n], g[3 * n :]
    return DoubledCotangentTangent(-dHp, dHq, dHP, -dHQ)


# ---------------------------------------------------------------------------
# reference integration

# Butcher's 7-stage, order-6 explicit Runge-Kutta tableau.
_RK6_A = (
    (),
    (1 / 3,),
    (0.0, 2 / 3),
    (1 / 12, 1 / 3, -1 / 12),
    (-1 / 16, 9 / 8, -3 / 16, -3 / 8),
    (0.0, 9 / 8, -3 / 8, -3 / 4, 1 / 2),
    (9 / 44, -9 / 11, 63 / 44, 18 / 11, 0.0, -16 / 11),
)
_RK6_B = (11 / 120, 0.0, 27 / 40, 27 / 40, -4 / 15, -4 / 15, 11 / 120)
RK6_ORDER = 6


def rk6_step(f: Callable, y: np.ndarray, h: float) -> np.ndarray:
    """One step of the explicit order-6 method for the autonomous ``y' = f(y)``."""
    ks = []
    for row in _RK6_A:
        yi = y
        for a, k in zip(row, ks):
            if a != 0.0:
                yi = yi + (h * a) * k
        ks.append(f(yi))
    out = y
    for b, k in zip(_RK6_B, ks):
        if b != 0.0:
            out = out + (h * b) * k
    return out


def _fixed_grid(t_end: float, h_ref: float) -> tuple[int, float]:
    if not h_ref > 0:
        raise ValueError("h_ref must be positive")
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    n_steps = max(1, math.ceil(t_end / h_ref - 1e-9))
    return n_steps, t_end / n_steps


def _dense(f, ys: np.ndarray, h: float, times: Sequence[float]) -> np.ndarray:
    """Full-order samples at arbitrary times via truncated steps from the grid."""
    out = []
    n_steps = len(ys) - 1
    for t in times:
        k = min(int(math.floor(t / h + 1e-12)), n_steps)
        dt = t - k * h
        out.append(ys[k] if abs(dt) <= 1e-15 * max(1.0, abs(t)) else rk6_step(f, ys[k], dt))
    return np.array(out)


def reference_solve(
    sys: ForcedSystem,
    s0: StateTangent,
    t_end: float,
    h_ref: float,
    times: Sequence[float] | None = None,
) -> TrajectoryRecord:
    """Fixed-step order-6 Runge-Kutta solution of the forced Euler-Lagrange equations.

    The step is ``t_end / ceil(t_end / h_ref)``.  With ``times`` given the
    record is sampled there (exactly, by a truncated step from the grid),
    otherwise on the integration grid.
    """
    n = sys.dim
    n_steps, h = _fixed_grid(t_end, h_ref)

    def f(y):
        return np.concatenate([y[n:], _acceleration(sys, y[:n], y[n:])])

    y = np.concatenate([sys.chart.check(s0.q, "q"), sys.chart.check(s0.v, "v")])
    ys = np.empty((n_steps + 1, 2 * n))
    ys[0] = y
    for k in range(n_steps):
        y = rk6_step(f, y, h)
        if not np.all(np.isfinite(y)):
            raise NonFinite(f"reference solution blew up at step {k + 1}")
        ys[k + 1] = y

    if times is None:
        ts = h * np.arange(n_steps + 1)
        ts[-1] = t_end
        samples = ys
    else:
        ts = np.asarray(times, dtype=float)
        samples = _dense(f, ys, h, ts)

    q, v = samples[:, :n], samples[:, n:]
    p = np.array([legendre(sys, StateTangent(a, b)).p for a, b in zip(q, v)])
    E = np.array([energy_value(sys, a, b) for a, b in zip(q, v)])
    return TrajectoryRecord(
        t=ts,
        q=q,
        p=p,
        v=v,
        energy=E,
        identity_defect=np.zeros(len(ts)),
        newton_iters=np.zeros(len(ts), dtype=int),
        method="rk6",
        h=h,
    )


def reference_solve_doubled(
    sys: ForcedSystem, d0: DoubledStateTangent, t_end: float, h_ref: float
) -> TrajectoryRecord:
    """Order-6 Runge-Kutta integration of the doubled Euler-Lagrange field.

    ``q, v`` hold the plus copy; ``identity_defect`` records
    ``max(|q - Q|, |v - V|)`` at each grid point.
    """
    n = sys.dim
    n_steps, h = _fixed_grid(t_end, h_ref)

    def f(y):
        d = DoubledStateTangent.from_arrays(y[:n], y[n : 2 * n], y[2 * n : 3 * n], y[3 * n :])
        return np.concatenate(doubled_field(sys, d))

    y = d0.as_vector()
    ys = np.empty((n_steps + 1, 4 * n))
    ys[0] = y
    for k in range(n_steps):
        y = rk6_step(f, y, h)
        if not np.all(np.isfinite(y)):
            raise NonFinite(f"doubled reference blew up at step {k + 1}")
        ys[k + 1] = y
    ts = h * np.arange(n_steps + 1)
    Q, V = ys[:, 2 * n : 3 * n], ys[:, 3 * n :]
    defect = np.max(np.abs(ys[:, : 2 * n] - ys[:, 2 * n :]), axis=1)
    p = np.array([legendre(sys, StateTangent(a, b)).p for a, b in zip(Q, V)])
    E = np.array([energy_value(sys, a, b) for a, b in zip(Q, V)])
    return TrajectoryRecord(
        t=ts,
        q=Q,
        p=p,
        v=V,
        energy=E,
        identity_defect=defect,
        newton_iters=np.zeros(len(ts), dtype=int),
        method="rk6-doubled",
        h=h,
    )
