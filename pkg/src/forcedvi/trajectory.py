"""Container for sampled trajectories produced by any integrator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TrajectoryRecord:
    """Time series of configurations, momenta and diagnostics.

    Arrays are indexed by sample along axis 0.  ``identity_defect`` is
    ``max |q_k - Q_k|`` per sample for doubled runs (zeros otherwise) and
    ``newton_iters`` the number of Newton iterations spent on each sample.
    """

    t: np.ndarray
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    energy: np.ndarray
    identity_defect: np.ndarray
    newton_iters: np.ndarray
    method: str = ""
    h: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def dim(self) -> int:
        return self.q.shape[1]

    @property
    def max_identity_defect(self) -> float:
        return float(np.max(self.identity_defect)) if len(self) else 0.0

    @property
    def total_newton_iters(self) -> int:
        return int(np.sum(self.newton_iters))

    def final_state(self) -> np.ndarray:
        """Concatenated ``(q, p)`` at the last sample."""
        return np.concatenate([self.q[-1], self.p[-1]])
