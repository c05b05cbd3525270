"""Benchmarks, convergence studies, ensembles and CSV output."""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from . import autodiff as ad
from .continuous import ForcedSystem, StateTangent, energy_value, legendre, reference_solve
from .discrete import DiscreteLagrangian, SolverConfig, alpha_rule, integrate, lobatto_galerkin
from .errors import BadMass, ForcedVIError, GridMismatch, ReferenceMismatch
from .geometry import Chart
from .trajectory import TrajectoryRecord

ROUNDOFF_FLOOR = 1e-11
CROSS_CHECK_TOL = 1e-9
# Random initial data reach |q| ~ 4, where the damping rate |eps - q^2| is ~15;
# ensemble ladders therefore start at h = 0.1 to stay in the asymptotic regime.
ENSEMBLE_H_RANGE = (0.1, 0.005)

CONVERGENCE_COLUMNS = ("method", "stages", "h", "err_state_inf", "err_energy", "slope_window_flag")
ENSEMBLE_COLUMNS = ("sample_id", "seed", "h", "err_state_inf", "err_energy")


# ---------------------------------------------------------------------------
# benchmarks


@dataclass(frozen=True)
class Benchmark:
    name: str
    system: ForcedSystem
    initial: StateTangent
    t_end: float
    params: dict = field(default_factory=dict)
    exact: Callable | None = None  # t -> (q, v)

    def with_initial(self, q, v) -> "Benchmark":
        return Benchmark(self.name, self.system, StateTangent(q, v), self.t_end, self.params, None)


def benchmark_damped_linear(M, D, K, q0=None, v0=None, t_end: float = 1.0) -> Benchmark:
    """``L = 1/2 v.Mv - 1/2 q.Kq`` with dissipation ``F = -Dv``.

    ``exact(t)`` gives the closed-form solution from the initial state (matrix
    exponential of the first-order system).

    Raises:
        BadMass: if ``M`` is not symmetric positive definite.
    """
    M, D, K = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (M, D, K))
    n = M.shape[0]
    if M.shape != (n, n) or D.shape != (n, n) or K.shape != (n, n):
        raise ValueError("M, D, K must be square matrices of equal size")
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise BadMass("mass matrix is not symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise BadMass("mass matrix is not positive definite") from exc

    def lagrangian(q, v):
        return 0.5 * ad.dot(v, M @ v) - 0.5 * ad.dot(q, K @ q)

    def force(q, v):
        return -(D @ v)

    q0 = np.ones(n) if q0 is None else np.asarray(q0, dtype=float)
    v0 = np.zeros(n) if v0 is None else np.asarray(v0, dtype=float)
    Minv = np.linalg.inv(M)
    A = np.block([[np.zeros((n, n)), np.eye(n)], [-Minv @ K, -Minv @ D]])
    y0 = np.concatenate([q0, v0])

    def exact(t):
        y = expm(A * float(t)) @ y0
        return y[:n], y[n:]

    sys = ForcedSystem(Chart(n), lagrangian, force, name="damped_linear")
    return Benchmark("damped_linear", sys, StateTangent(q0, v0), t_end, {"M": M, "D": D, "K": K}, exact)


def benchmark_van_der_pol(eps: float = 0.5, rho: float = 0.02, lam: float = 0.8) -> Benchmark:
    """Two coupled van der Pol oscillators on the torus (treated as ``R^2``).

    ``L = 1/2 (v1^2 + v2^2) - 1/2 (q1^2 + (1 + rho) q2^2) - lam (q1 - q2)^2``,
    ``F = ((eps - q1^2) v1, (eps - q2^2) v2)``; initial state
    ``(q1, q2, v1, v2) = (-1/2, -1/4, 0, 4)`` and ``t_end = 1``.
    """
    eps, rho, lam = float(eps), float(rho), float(lam)
    if not all(math.isfinite(x) for x in (eps, rho, lam)):
        raise ValueError("parameters must be finite")

    def lagrangian(q, v):
        return (
            0.5 * (v[0] * v[0] + v[1] * v[1])
            - 0.5 * (q[0] * q[0] + (1.0 + rho) * (q[1] * q[1]))
            - lam * (q[0] - q[1]) ** 2
        )

    def force(q, v):
        return ad.stack([(eps - q[0] * q[0]) * v[0], (eps - q[1] * q[1]) * v[1]])

    sys = ForcedSystem(Chart(2, (True, True)), lagrangian, force, name="van_der_pol")
    s0 = StateTangent([-0.5, -0.25], [0.0, 4.0])
    return Benchmark("van_der_pol", sys, s0, 1.0, {"eps": eps, "rho": rho, "lam": lam})


def make_integrator(sys: ForcedSystem, family: str, stages: int = 3, alpha: float = 0.5) -> DiscreteLagrangian:
    if family == "alpha":
        return alpha_rule(sys, alpha)
    if family == "lobatto":
        return lobatto_galerkin(sys, stages)
    raise ValueError(f"unknown integrator family {family!r}")


# ---------------------------------------------------------------------------
# fits and diagnostics


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    retained: int
    mask: np.ndarray

    def monotone(self) -> bool:
        return bool(self.retained >= 2)


def fit_slope(h, err, floor: float = ROUNDOFF_FLOOR) -> SlopeFit:
    """Least-squares slope of ``log err`` against ``log h`` over points with
    finite error at or above ``floor``."""
    h = np.asarray(h, dtype=float)
    err = np.asarray(err, dtype=float)
    mask = np.isfinite(err) & (err >= floor)
    k = int(mask.sum())
    if k < 2:
        return SlopeFit(float("nan"), float("nan"), float("nan"), k, mask)
    x, y = np.log(h[mask]), np.log(err[mask])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return SlopeFit(float(slope), float(intercept), r2, k, mask)


def monotone_to_floor(h, err, floor: float = ROUNDOFF_FLOOR) -> bool:
    """Errors decrease strictly as ``h`` shrinks until they first drop below ``floor``."""
    order = np.argsort(-np.asarray(h, dtype=float))
    e = np.asarray(err, dtype=float)[order]
    if not np.all(np.isfinite(e)):
        return False
    for a, b in zip(e, e[1:]):
        if a < floor:
            break
        if not b < a:
            return False
    return True


@dataclass(frozen=True)
class EnergyErrorSeries:
    final: float
    profile: np.ndarray
    t: np.ndarray


def energy_error_series(record: TrajectoryRecord, reference: TrajectoryRecord) -> EnergyErrorSeries:
    """``|E_method - E_reference|`` along a shared time grid.

    Raises:
        GridMismatch: if the two records are sampled at different times.
    """
    t1, t2 = np.asarray(record.t), np.asarray(reference.t)
    if t1.shape != t2.shape or np.max(np.abs(t1 - t2)) > 1e-12 * max(1.0, float(np.max(np.abs(t1)))):
        raise GridMismatch(f"grids differ ({len(t1)} vs {len(t2)} samples)")
    prof = np.abs(np.asarray(record.energy) - np.asarray(reference.energy))
    return EnergyErrorSeries(float(prof[-1]), prof, t1)


def state_at(sys: ForcedSystem, q, v) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.concatenate([q, legendre(sys, StateTangent(q, v)).p])


# ---------------------------------------------------------------------------
# references


@dataclass(frozen=True)
class Reference:
    state: np.ndarray  # final (q, p)
    energy: float
    kind: str
    h: float
    cross_check_gap: float = float("nan")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FV_THREADS", "1")))
    except ValueError:
        return 1


def compute_reference(
    bench: Benchmark,
    kind: str = "doubled",
    h_ref: float = 2.5e-4,
    cross_check: bool = True,
    h_classical: float | None = None,
    cfg: SolverConfig | None = None,
) -> Reference:
    """Final state of a fine-step reference run.

    ``kind="doubled"`` integrates with the doubled three-stage Lobatto method
    and, with ``cross_check``, demands agreement within ``CROSS_CHECK_TOL`` with
    the classical order-6 solver.  ``kind="classical"`` uses the latter alone.

    Raises:
        ReferenceMismatch: if the cross-check fails.
    """
    sys, s0, T = bench.system, bench.initial, bench.t_end
    h_cl = h_classical if h_classical is not None else max(h_ref, 1e-3)

    def classical():
        rec = reference_solve(sys, s0, T, h_cl)
        return state_at(sys, rec.q[-1], rec.v[-1]), float(rec.energy[-1])

    if kind == "classical":
        y, E = classical()
        return Reference(y, E, kind, h_cl)
    if kind != "doubled":
        raise ValueError(f"unknown reference kind {kind!r}")
    N = max(1, round(T / h_ref))
    rec = integrate(lobatto_galerkin(sys, 3), s0, N, T / N, cfg)
    y = rec.final_state()
    gap = float("nan")
    if cross_check:
        yc, _ = classical()
        gap = float(np.max(np.abs(y - yc)))
        if not gap < CROSS_CHECK_TOL:
            raise ReferenceMismatch(gap, CROSS_CHECK_TOL)
    return Reference(y, float(rec.energy[-1]), kind, T / N, gap)


# ---------------------------------------------------------------------------
# convergence


def default_ladder(t_end: float = 1.0, h_max: float = 0.25, h_min: float = 1e-3, points: int = 8) -> list[int]:
    """Step counts for a geometric ladder of step sizes from ``h_max`` down to ``h_min``."""
    hs = np.geomspace(h_max, h_min, points)
    Ns = sorted({max(1, int(round(t_end / h))) for h in hs})
    return Ns


@dataclass(frozen=True)
class ConvergenceSpec:
    family: str = "alpha"
    stages: int = 3
    alpha: float = 0.5
    steps: tuple[int, ...] = ()
    reference: str = "doubled"
    h_ref: float | None = None
    cross_check: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)

    @property
    def label(self) -> str:
        if self.family == "alpha":
            return "midpoint" if self.alpha == 0.5 else f"alpha{self.alpha:g}"
        return f"lobatto{self.stages}"

    @property
    def stage_count(self) -> int:
        return 1 if self.family == "alpha" else int(self.stages)


@dataclass
class ConvergenceStudy:
    method: str
    stages: int
    h: np.ndarray
    err_state: np.ndarray
    err_energy: np.ndarray
    fit: SlopeFit
    energy_fit: SlopeFit
    reference: Reference
    failures: dict = field(default_factory=dict)
    max_identity_defect: float = 0.0

    @property
    def slope(self) -> float:
        return self.fit.slope

    @property
    def r2(self) -> float:
        return self.fit.r2

    @property
    def retained(self) -> int:
        return self.fit.retained

    def rows(self) -> list[tuple]:
        return [
            (self.method, self.stages, h, es, ee, int(flag))
            for h, es, ee, flag in zip(self.h, self.err_state, self.err_energy, self.fit.mask)
        ]


def _ladder_point(Ld, bench, N, ref, cfg):
    try:
        rec = integrate(Ld, bench.initial, N, bench.t_end / N, cfg)
    except ForcedVIError as exc:
        return float("nan"), float("nan"), 0.0, str(exc)
    es = float(np.max(np.abs(rec.final_state() - ref.state)))
    ee = abs(float(rec.energy[-1]) - ref.energy)
    return es, ee, rec.max_identity_defect, None


def run_convergence(bench: Benchmark, spec: ConvergenceSpec, reference: Reference | None = None) -> ConvergenceStudy:
    """Errors at ``t_end`` over a step ladder and the fitted order.

    Ladder points that fail to converge are kept with ``nan`` errors and
    listed in ``failures``.
    """
    steps = list(spec.steps) or default_ladder(bench.t_end)
    hs = np.array([bench.t_end / N for N in steps])
    if reference is None:
        h_ref = spec.h_ref if spec.h_ref is not None else float(hs.min()) / 4
        reference = compute_reference(bench, spec.reference, h_ref, spec.cross_check, cfg=spec.solver)
    Ld = make_integrator(bench.system, spec.family, spec.stages, spec.alpha)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(lambda N: _ladder_point(Ld, bench, N, reference, spec.solver), steps))

    es = np.array([r[0] for r in results])
    ee = np.array([r[1] for r in results])
    failures = {steps[i]: r[3] for i, r in enumerate(results) if r[3] is not None}
    return ConvergenceStudy(
        method=spec.label,
        stages=spec.stage_count,
        h=hs,
        err_state=es,
        err_energy=ee,
        fit=fit_slope(hs, es),
        energy_fit=fit_slope(hs, ee),
        reference=reference,
        failures=failures,
        max_identity_defect=max((r[2] for r in results), default=0.0),
    )


# ---------------------------------------------------------------------------
# ensembles


@dataclass(frozen=True)
class EnsembleSpec:
    samples: int = 25
    seed: int = 0
    box: tuple[float, float] = (-4.0, 4.0)
    sample_velocities: bool = False
    family: str = "lobatto"
    stages: int = 3
    alpha: float = 0.5
    steps: tuple[int, ...] = ()
    reference: str = "classical"
    h_ref: float = 1e-3
    solver: SolverConfig = field(default_factory=SolverConfig)


@dataclass
class EnsembleStudy:
    seed: int
    h: np.ndarray
    initial: np.ndarray  # (samples, 2n) rows of (q, v)
    err_state: np.ndarray  # (samples, len(h))
    err_energy: np.ndarray
    slopes: np.ndarray
    max_identity_defect: float
    failures: dict = field(default_factory=dict)

    @property
    def mean(self) -> np.ndarray:
        return np.nanmean(self.err_state, axis=0)

    @property
    def max(self) -> np.ndarray:
        return np.nanmax(self.err_state, axis=0)

    @property
    def min(self) -> np.ndarray:
        return np.nanmin(self.err_state, axis=0)

    def rows(self) -> list[tuple]:
        out = []
        for i in range(self.err_state.shape[0]):
            for j, h in enumerate(self.h):
                out.append((i, self.seed, h, self.err_state[i, j], self.err_energy[i, j]))
        return out


def sample_initial_states(bench: Benchmark, spec: EnsembleSpec) -> np.ndarray:
    """Rows ``(q, v)`` drawn uniformly from the box.

    Sample ``i`` draws from ``numpy.random.default_rng(SeedSequence(seed, spawn_key=(i,)))``
    (PCG64), so every sample is independent of the sample count and of the
    execution order.  Positions are drawn first, then velocities if requested.
    """
    lo, hi = spec.box
    n = bench.system.dim
    rows = []
    for i in range(spec.samples):
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(i,)))
        q = rng.uniform(lo, hi, size=n)
        v = rng.uniform(lo, hi, size=n) if spec.sample_velocities else np.array(bench.initial.v)
        rows.append(np.concatenate([q, v]))
    return np.array(rows)


def run_ensemble(bench: Benchmark, spec: EnsembleSpec) -> EnsembleStudy:
    """Convergence curves for random initial data; deterministic given ``spec.seed``."""
    if spec.samples < 1:
        raise ValueError("samples must be >= 1")
    n = bench.system.dim
    init = sample_initial_states(bench, spec)
    steps = list(spec.steps) or default_ladder(bench.t_end, *ENSEMBLE_H_RANGE)
    hs = np.array([bench.t_end / N for N in steps])
    cs = ConvergenceSpec(
        family=spec.family,
        stages=spec.stages,
        alpha=spec.alpha,
        steps=tuple(steps),
        reference=spec.reference,
        h_ref=spec.h_ref,
        cross_check=False,
        solver=spec.solver,
    )

    def member(row):
        b = bench.with_initial(row[:n], row[n:])
        try:
            ref = compute_reference(b, spec.reference, spec.h_ref, cross_check=False, cfg=spec.solver)
        except ForcedVIError as exc:
            nan = np.full(len(steps), np.nan)
            return nan, nan, 0.0, {"reference": str(exc)}
        st = run_convergence(b, cs, ref)
        return st.err_state, st.err_energy, st.max_identity_defect, st.failures

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(member, init))

    es = np.array([r[0] for r in results])
    ee = np.array([r[1] for r in results])
    slopes = np.array([fit_slope(hs, e).slope for e in es])
    failures = {i: r[3] for i, r in enumerate(results) if r[3]}
    return EnsembleStudy(
        seed=spec.seed,
        h=hs,
        initial=init,
        err_state=es,
        err_energy=ee,
        slopes=slopes,
        max_identity_defect=max(r[2] for r in results),
        failures=failures,
    )


# ---------------------------------------------------------------------------
# CSV output


def fmt(x) -> str:
    """17 significant digits for floats; integers and strings verbatim."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def render_csv(columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(x) for x in r])
    return buf.getvalue()


def atomic_write(path: str, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".csv")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trajectory_columns(n: int) -> list[str]:
    return ["t"] + [f"q{i + 1}" for i in range(n)] + [f"p{i + 1}" for i in range(n)] + [
        "E",
        "identity_defect",
        "newton_iters",
    ]


def write_trajectory_csv(record: TrajectoryRecord, path: str) -> None:
    n = record.dim
    rows = [
        [record.t[k], *record.q[k], *record.p[k], record.energy[k], record.identity_defect[k], int(record.newton_iters[k])]
        for k in range(len(record))
    ]
    atomic_write(path, render_csv(trajectory_columns(n), rows))


def write_convergence_csv(studies: Sequence[ConvergenceStudy], path: str) -> None:
    rows = [r for st in studies for r in st.rows()]
    atomic_write(path, render_csv(CONVERGENCE_COLUMNS, rows))


def write_ensemble_csv(study: EnsembleStudy, path: str) -> None:
    atomic_write(path, render_csv(ENSEMBLE_COLUMNS, study.rows()))
