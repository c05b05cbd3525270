"""Discrete Lagrangians, the doubled discrete Lagrangian and discrete Euler-Lagrange stepping.

Every discrete Lagrangian here is a *nodal quadrature*: with ``s`` control
points ``x_0 = q0, x_1, ..., x_{s-1} = q1`` on one step,

    S(x; h) = h * sum_k b_k  Lag( sum_j A_kj x_j,  sum_j B_kj x_j / h ),

where ``Lag`` is either the physical Lagrangian ``L`` or the doubled
Lagrangian ``L(Q, V) - L(q, v) - K`` acting on stacked ``(q, Q)`` coordinates.
Interior control points are eliminated by stationarity, which yields
``L_d(q0, q1, h)``.

* alpha rule: two nodes, ``A = [[1 - alpha, alpha]]``, ``B = [[-1, 1]]``, ``b = [1]``.
* Galerkin-Lobatto with ``s`` nodes: ``A = I``, ``B`` the differentiation
  matrix of the Lagrange basis at the Lobatto points, ``b`` the Lobatto weights.

The doubled variant applies the same ``A``, ``B`` to both copies and evaluates
the doubled Lagrangian node by node, so ``L_d`` changes sign exactly (bitwise)
when the copies are swapped.

Stepping carries momenta: given ``(x_k, p_k)`` the unknowns are the remaining
control points of the step, fixed by

    dS/dx_0 + p_k = 0,   dS/dx_j = 0 (interior),   p_{k+1} = dS/dx_{s-1}.

Eliminating the momenta gives exactly the discrete Euler-Lagrange equations
``D1 L_d(q_k, q_{k+1}) + D2 L_d(q_{k-1}, q_k) = 0``.  Residuals are multiplied
by ``h`` before the tolerance test so that ``newton_tol`` acts on
configuration-sized quantities.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .continuous import (
    ForcedSystem,
    StateCotangent,
    StateTangent,
    energy_value,
    legendre,
    legendre_inverse,
)
from .errors import InnerSolveFailed, NewtonDiverged, SingularD12, StepTooSmall
from .trajectory import TrajectoryRecord

H_MIN = 1e-13
_EPS = np.finfo(float).eps


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureScheme:
    """Quadrature rule on ``[0, 1]`` used to build a Galerkin discrete Lagrangian."""

    stages: int
    nodes: np.ndarray
    weights: np.ndarray
    degree: int

    def __post_init__(self):
        c = np.asarray(self.nodes, dtype=float)
        b = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "nodes", c)
        object.__setattr__(self, "weights", b)
        if self.stages < 1 or c.shape != (self.stages,) or b.shape != (self.stages,):
            raise ValueError("nodes and weights must have one entry per stage")
        if abs(b.sum() - 1.0) > 1e-14:
            raise ValueError("weights must sum to 1")
        if np.any(b <= 0):
            raise ValueError("weights must be positive")
        if self.stages > 1 and np.any(np.diff(c) <= 0):
            raise ValueError("nodes must be strictly increasing")
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError("nodes must lie in [0, 1]")


def lobatto_scheme(s: int) -> QuadratureScheme:
    """Gauss-Lobatto rule with ``s >= 2`` points mapped to ``[0, 1]``."""
    if s < 2:
        raise ValueError("Lobatto rules need at least 2 points")
    leg = np.polynomial.legendre
    P = leg.Legendre.basis(s - 1)
    interior = np.sort(np.real(P.deriv().roots())) if s > 2 else np.array([])
    x = np.concatenate([[-1.0], interior, [1.0]])
    w = 2.0 / (s * (s - 1) * P(x) ** 2)
    c = 0.5 * (x + 1.0)
    c[0], c[-1] = 0.0, 1.0
    b = 0.5 * w
    # symmetrize against roundoff
    c = 0.5 * (c + (1.0 - c[::-1]))
    b = 0.5 * (b + b[::-1])
    b = b / b.sum()
    return QuadratureScheme(s, c, b, s - 1)


def differentiation_matrix(c: np.ndarray) -> np.ndarray:
    """``D[i, j] = l_j'(c_i)`` for the Lagrange basis on nodes ``c`` (barycentric form)."""
    c = np.asarray(c, dtype=float)
    diff = c[:, None] - c[None, :]
    np.fill_diagonal(diff, 1.0)
    w = 1.0 / np.prod(diff, axis=1)
    D = (w[None, :] / w[:, None]) / diff
    np.fill_diagonal(D, 0.0)
    np.fill_diagonal(D, -D.sum(axis=1))
    return D


# ---------------------------------------------------------------------------
# discrete Lagrangians


@dataclass(frozen=True)
class DiscreteLagrangian:
    """Nodal-quadrature discrete Lagrangian of a forced system.

    ``doubled=True`` discretizes the doubled Lagrangian on stacked ``(q, Q)``
    coordinates (dimension ``2n``); ``doubled=False`` discretizes ``L`` alone
    and ignores the force.
    """

    system: ForcedSystem
    interp: np.ndarray
    deriv: np.ndarray
    weights: np.ndarray
    design_order: int
    doubled: bool = True
    family: str = "lobatto"
    param: float = 0.0
    name: str = ""

    @property
    def n(self) -> int:
        return self.system.dim

    @property
    def dim(self) -> int:
        return 2 * self.n if self.doubled else self.n

    @property
    def n_nodes(self) -> int:
        return self.interp.shape[1]

    @property
    def meta_nodes(self) -> np.ndarray:
        """Times of the control points as fractions of ``h``."""
        s = self.n_nodes
        if self.family == "lobatto":
            return lobatto_scheme(s).nodes
        return np.linspace(0.0, 1.0, s)

    def as_doubled(self) -> "DiscreteLagrangian":
        return replace(self, doubled=True)

    def as_single(self) -> "DiscreteLagrangian":
        return replace(self, doubled=False)

    def with_system(self, system: ForcedSystem) -> "DiscreteLagrangian":
        return replace(self, system=system)

    # -- evaluation ---------------------------------------------------------
    def _density(self, X, V):
        sys = self.system
        if not self.doubled:
            return sys.lagrangian(X, V)
        n = self.n
        return sys.doubled_L(X[:n], V[:n], X[n:], V[n:])

    def action(self, nodes, h: float):
        """Quadrature action of control points ``nodes`` (shape ``(s, dim)``, or a
        flat Dual seeded node by node)."""
        X = _contract(nodes, self.interp, self.n_nodes, self.dim)
        V = _contract(nodes, self.deriv, self.n_nodes, self.dim) / h
        dens = self._density(X, V)
        return (dens * (h * self.weights)).sum()

    def eval(self, x0, x1, h: float, interior=None) -> float:
        """``L_d(x0, x1, h)`` with interior control points eliminated by stationarity."""
        nodes = self.solve_interior(x0, x1, h, interior)
        return float(ad.value_of(self.action(nodes, h)))

    def eval_doubled(self, q0, Q0, q1, Q1, h: float) -> float:
        """Doubled ``L_d`` at ``(q0, Q0, q1, Q1)``."""
        if not self.doubled:
            raise ValueError("eval_doubled needs a doubled discrete Lagrangian")
        return self.eval(np.concatenate([q0, Q0]), np.concatenate([q1, Q1]), h)

    def solve_interior(self, x0, x1, h: float, interior=None, cfg: "SolverConfig | None" = None):
        """Control points ``(s, dim)`` with the interior ones made stationary."""
        x0 = np.asarray(x0, dtype=float)
        x1 = np.asarray(x1, dtype=float)
        s = self.n_nodes
        c = self.meta_nodes
        nodes = x0[None, :] + c[:, None] * (x1 - x0)[None, :]
        if interior is not None:
            nodes[1:-1] = np.asarray(interior, dtype=float).reshape(s - 2, self.dim)
        nodes[0], nodes[-1] = x0, x1
        if s <= 2:
            return nodes
        return _eliminate(self, nodes, h, cfg or SolverConfig(), forced=False)

    def grad_hess(self, nodes, h: float):
        """Gradient ``(s, dim)`` and Hessian ``(s, dim, s, dim)`` of the action."""
        s, d = self.n_nodes, self.dim
        z = ad.seed(np.asarray(nodes, dtype=float).reshape(s * d))
        y = self.action(z, h)
        ad._check_finite(y.val, y.grad, y.hess)
        return y.grad.reshape(s, d), y.hess.reshape(s, d, s, d)

    def gradient(self, nodes, h: float) -> np.ndarray:
        s, d = self.n_nodes, self.dim
        z = ad.seed(np.asarray(nodes, dtype=float).reshape(s * d), order=1)
        y = self.action(z, h)
        ad._check_finite(y.val, y.grad)
        return y.grad.reshape(s, d)

    # -- forces (single variant acting with the nodal forces of the doubled one) --
    def nodal_forces(self, nodes, h: float) -> np.ndarray:
        """Per-control-point forces ``-d K_d / dQ_j`` on the identities, shape ``(s, n)``.

        ``nodes`` are single-copy control points ``(s, n)``.
        """
        X = _contract(np.asarray(nodes, dtype=float), self.interp, self.n_nodes, self.n)
        V = _contract(np.asarray(nodes, dtype=float), self.deriv, self.n_nodes, self.n) / h
        Fk = np.asarray(self.system.force(X, V), dtype=float) * np.ones_like(X)
        return h * np.einsum("k,kj,nk->jn", self.weights, self.interp, Fk)

    def _forced_grad_jac(self, nodes, h: float):
        """Gradient and Jacobian of ``dS_L/dx_j + f_j`` over single-copy nodes."""
        s, n = self.n_nodes, self.n
        single = self if not self.doubled else self.as_single()
        g, H = single.grad_hess(nodes, h)
        z = ad.seed(np.asarray(nodes, dtype=float).reshape(s * n), order=1)
        X = _contract(z, self.interp, s, n)
        V = _contract(z, self.deriv, s, n) / h
        Fk = self.system.force(X, V)
        if isinstance(Fk, ad.Dual):
            fval = np.broadcast_to(Fk.val, (n, len(self.weights)))
            fgrad = np.broadcast_to(Fk.grad, (n, len(self.weights), s * n))
        else:
            fval = np.broadcast_to(np.asarray(Fk, dtype=float), (n, len(self.weights)))
            fgrad = np.zeros((n, len(self.weights), s * n))
        wA = h * self.weights[:, None] * self.interp
        f = np.einsum("kj,nk->jn", wA, fval)
        fj = np.einsum("kj,nkm->jnm", wA, fgrad).reshape(s, n, s, n)
        return g + f, H + fj


def _contract(z, M: np.ndarray, s: int, d: int):
    """Coordinate-first ``(d, k)`` array of ``sum_j M[k, j] x_j``; ``z`` holds nodes
    ``(s, d)`` as an array or as a flat Dual seeded node-major."""
    if isinstance(z, ad.Dual):
        m = z.nvars
        val = np.einsum("ks,sd->dk", M, z.val.reshape(s, d))
        grad = np.einsum("ks,sdm->dkm", M, z.grad.reshape(s, d, m))
        hess = None
        if z.hess is not None:
            hess = np.einsum("ks,sdmn->dkmn", M, z.hess.reshape(s, d, m, m))
        return ad.Dual(val, grad, hess)
    return np.einsum("ks,sd->dk", M, np.asarray(z, dtype=float).reshape(s, d))


def alpha_rule(sys: ForcedSystem, alpha: float, doubled: bool = True) -> DiscreteLagrangian:
    """``L_d = h L((1 - alpha) q0 + alpha q1, (q1 - q0) / h)``; order 2 at ``alpha = 1/2``, else 1."""
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    order = 2 if alpha == 0.5 else 1
    return DiscreteLagrangian(
        system=sys,
        interp=np.array([[1.0 - alpha, alpha]]),
        deriv=np.array([[-1.0, 1.0]]),
        weights=np.array([1.0]),
        design_order=order,
        doubled=doubled,
        family="alpha",
        param=alpha,
        name="midpoint" if alpha == 0.5 else f"alpha={alpha:g}",
    )


def lobatto_galerkin(sys: ForcedSystem, s: int, doubled: bool = True) -> DiscreteLagrangian:
    """Galerkin discrete Lagrangian: degree ``s - 1`` interpolant through ``s`` control
    points at the Lobatto nodes, action by ``s``-point Lobatto quadrature; order ``2s - 2``."""
    if int(s) != s or not 2 <= s <= 5:
        raise ValueError("stages must be in 2..5")
    s = int(s)
    q = lobatto_scheme(s)
    return DiscreteLagrangian(
        system=sys,
        interp=np.eye(s),
        deriv=differentiation_matrix(q.nodes),
        weights=q.weights,
        design_order=2 * s - 2,
        doubled=doubled,
        family="lobatto",
        param=float(s),
        name=f"lobatto{s}",
    )


# ---------------------------------------------------------------------------
# solver


@dataclass(frozen=True)
class SolverConfig:
    """Newton settings; ``mode`` is ``"full"`` (doubled unknowns) or ``"fast"``
    (solve directly on the identities)."""

    newton_tol: float = 1e-12
    max_iters: int = 50
    jacobian_mode: str = "exact-AD"
    mode: str = "full"

    def __post_init__(self):
        if not self.newton_tol > 10 * _EPS:
            raise ValueError("newton_tol must exceed 10 * machine epsilon")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.jacobian_mode != "exact-AD":
            raise ValueError("only exact-AD Jacobians are supported")
        if self.mode not in ("full", "fast"):
            raise ValueError("mode must be 'full' or 'fast'")


@dataclass(frozen=True)
class DiscretePair:
    q_prev: np.ndarray
    q_curr: np.ndarray
    h: float

    def __post_init__(self):
        object.__setattr__(self, "q_prev", np.asarray(self.q_prev, dtype=float))
        object.__setattr__(self, "q_curr", np.asarray(self.q_curr, dtype=float))
        if not self.h > 0:
            raise ValueError("h must be positive")
        if self.q_prev.shape != self.q_curr.shape:
            raise ValueError("q_prev and q_curr dimension mismatch")


@dataclass
class _Solve:
    nodes: np.ndarray
    g: np.ndarray
    H: np.ndarray
    dz: np.ndarray
    iters: int


def _newton(Ld, nodes, h, cfg, rows, cols, extra, forced, step=None, inner=False) -> _Solve:
    """Solve ``g[rows] + extra = 0`` for the control points ``cols``.

    The final correction is always applied: the Jacobian is already available
    from the evaluation that certified convergence.
    """
    if h < H_MIN:
        raise StepTooSmall(f"h = {h:.3e} is below {H_MIN:.0e}")
    nodes = np.array(nodes, dtype=float)
    d = nodes.shape[1]
    res = np.inf
    for it in range(1, cfg.max_iters + 1):
        try:
            g, H = Ld._forced_grad_jac(nodes, h) if forced else Ld.grad_hess(nodes, h)
        except ArithmeticError:
            g = None
        if g is None or not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
            if inner:
                raise InnerSolveFailed(np.inf)
            raise NewtonDiverged(it, np.inf, step)
        r = (g[rows] + extra).reshape(-1)
        J = H[rows][:, :, cols, :].reshape(len(rows) * d, len(cols) * d)
        res = h * float(np.max(np.abs(r))) if r.size else 0.0
        try:
            dz = -np.linalg.solve(J, r)
        except np.linalg.LinAlgError as exc:
            raise SingularD12(f"singular step Jacobian{'' if step is None else f' at step {step}'}") from exc
        if not np.all(np.isfinite(dz)):
            raise SingularD12("non-finite Newton update")
        nodes[cols] += dz.reshape(len(cols), d)
        if res <= cfg.newton_tol:
            return _Solve(nodes, g, H, dz.reshape(len(cols), d), it)
    if inner:
        raise InnerSolveFailed(res)
    raise NewtonDiverged(cfg.max_iters, res, step)


def _eliminate(Ld, nodes, h, cfg, forced) -> np.ndarray:
    s = nodes.shape[0]
    idx = list(range(1, s - 1))
    return _newton(Ld, nodes, h, cfg, idx, idx, 0.0, forced, inner=True).nodes


def _lin(sol: _Solve, row: int, cols) -> np.ndarray:
    """Gradient row ``row`` updated to first order for the final Newton correction."""
    return sol.g[row] + np.einsum("ajb,jb->a", sol.H[row][:, cols, :], sol.dz)


def _step(Ld, x_k, p_k, h, cfg, guess, step=None, forced=False) -> tuple[_Solve, np.ndarray, np.ndarray]:
    """Advance ``(x_k, p_k)``; returns the solve, ``p_{k+1}`` and ``p^-_k``."""
    s = Ld.n_nodes
    nodes = np.array(guess, dtype=float)
    nodes[0] = x_k
    rows = list(range(0, s - 1))
    cols = list(range(1, s))
    extra = np.zeros((s - 1, nodes.shape[1]))
    extra[0] = p_k
    sol = _newton(Ld, nodes, h, cfg, rows, cols, extra, forced, step)
    p_next = _lin(sol, s - 1, cols)
    p_minus = -_lin(sol, 0, cols)
    return sol, p_next, p_minus


def _guess(Ld, x_k, x_next) -> np.ndarray:
    c = Ld.meta_nodes
    return x_k[None, :] + c[:, None] * (x_next - x_k)[None, :]


def _use_fast(Ld, cfg) -> bool:
    return Ld.doubled and cfg.mode == "fast"


def _lift_point(Ld, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if Ld.doubled and q.shape == (Ld.n,):
        return np.concatenate([q, q])
    return q


def _lift_momentum(Ld, p) -> np.ndarray:
    """Doubled momentum on the identities is ``(-p, p)``."""
    p = np.asarray(p, dtype=float)
    if Ld.doubled and p.shape == (Ld.n,):
        return np.concatenate([-p, p])
    return p


# ---------------------------------------------------------------------------
# Legendre transforms, forces and single steps


def discrete_legendre_minus(Ld: DiscreteLagrangian, q0, q1, h: float) -> StateCotangent:
    """``F^- L_d(q0, q1) = (q0, -D1 L_d(q0, q1))``."""
    nodes = Ld.solve_interior(q0, q1, h)
    return StateCotangent(nodes[0], -Ld.gradient(nodes, h)[0])


def discrete_legendre_plus(Ld: DiscreteLagrangian, q0, q1, h: float) -> StateCotangent:
    """``F^+ L_d(q0, q1) = (q1, D2 L_d(q0, q1))``."""
    nodes = Ld.solve_interior(q0, q1, h)
    return StateCotangent(nodes[-1], Ld.gradient(nodes, h)[-1])


def discrete_partials(Ld: DiscreteLagrangian, q0, q1, h: float) -> tuple[np.ndarray, np.ndarray]:
    """``(D1 L_d, D2 L_d)`` with interior control points eliminated."""
    nodes = Ld.solve_interior(q0, q1, h)
    g = Ld.gradient(nodes, h)
    return g[0], g[-1]


def del_residual(Ld: DiscreteLagrangian, q_prev, q_curr, q_next, h: float) -> np.ndarray:
    """``D1 L_d(q_curr, q_next) + D2 L_d(q_prev, q_curr)``."""
    return discrete_partials(Ld, q_curr, q_next, h)[0] + discrete_partials(Ld, q_prev, q_curr, h)[1]


def forced_interior(Ld: DiscreteLagrangian, q0, q1, h: float, cfg: "SolverConfig | None" = None) -> np.ndarray:
    """Single-copy control points whose interior satisfies the forced stage equations
    ``dS_L/dx_j + f_j = 0``."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    nodes = _guess(Ld, q0, q1)
    if Ld.n_nodes <= 2:
        return nodes
    return _eliminate(Ld, nodes, h, cfg or SolverConfig(), forced=True)


def discrete_forces_from_K(Ld_doubled: DiscreteLagrangian) -> tuple[Callable, Callable]:
    """Left and right discrete forces carried by the discretized generalized potential.

    ``f_minus(q0, q1, h) = -dK_d/dQ0`` and ``f_plus(q0, q1, h) = -dK_d/dQ1`` on
    the identities, computed by automatic differentiation of the doubled
    discrete Lagrangian; equivalently ``+dK_d/dq0`` and ``+dK_d/dq1``.  Interior
    control points (Lobatto) satisfy the forced stage equations.  For the alpha
    rule these are ``h (1 - alpha) F(q_alpha, (q1 - q0)/h)`` and
    ``h alpha F(q_alpha, (q1 - q0)/h)``.
    """
    if not Ld_doubled.doubled:
        raise ValueError("discrete_forces_from_K needs the doubled discrete Lagrangian")
    n = Ld_doubled.n

    def _forces(q0, q1, h):
        single = forced_interior(Ld_doubled, q0, q1, h)
        both = np.concatenate([single, single], axis=1)
        g_full = Ld_doubled.gradient(both, h)
        g_L = Ld_doubled.as_single().gradient(single, h)
        # Q-rows of the doubled gradient are dS_L/dx - dK_d/dQ
        return g_full[:, n:] - g_L

    def f_minus(q0, q1, h):
        return _forces(q0, q1, h)[0]

    def f_plus(q0, q1, h):
        return _forces(q0, q1, h)[-1]

    f_minus.nodal = _forces  # type: ignore[attr-defined]
    return f_minus, f_plus


def forced_del_residual(Ld: DiscreteLagrangian, q_prev, q_curr, q_next, h: float) -> np.ndarray:
    """``D1 L_d(q_k, q_{k+1}) + D2 L_d(q_{k-1}, q_k) + f^-(q_k, q_{k+1}) + f^+(q_{k-1}, q_k)``

    for the physical ``L_d`` with forces from :func:`discrete_forces_from_K`.
    Partials are taken at the forced interior control points.
    """
    single = Ld.as_single()
    f_minus, f_plus = discrete_forces_from_K(Ld.as_doubled())
    right = forced_interior(Ld, q_curr, q_next, h)
    left = forced_interior(Ld, q_prev, q_curr, h)
    return (
        single.gradient(right, h)[0]
        + single.gradient(left, h)[-1]
        + f_minus(q_curr, q_next, h)
        + f_plus(q_prev, q_curr, h)
    )


def _momentum_after(Ld, q_prev, q_curr, h, cfg, forced) -> np.ndarray:
    nodes = _guess(Ld, q_prev, q_curr)
    if Ld.n_nodes > 2:
        nodes = _eliminate(Ld, nodes, h, cfg, forced)
    if forced:
        return Ld._forced_grad_jac(nodes, h)[0][-1]
    return Ld.gradient(nodes, h)[-1]


def del_step(Ld: DiscreteLagrangian, pair: DiscretePair, cfg: SolverConfig | None = None) -> np.ndarray:
    """``q_next`` solving ``D1 L_d(q_curr, q_next) + D2 L_d(q_prev, q_curr) = 0``.

    Newton starts from ``2 q_curr - q_prev``.  For a doubled ``L_d`` the pair
    lives in ``R^{2n}``; in ``"fast"`` mode an ``n``-dimensional pair is
    advanced on the identities.

    Raises:
        NewtonDiverged, SingularD12, StepTooSmall.
    """
    cfg = cfg or SolverConfig()
    h = float(pair.h)
    if h < H_MIN:
        raise StepTooSmall(f"h = {h:.3e} is below {H_MIN:.0e}")
    forced = _use_fast(Ld, cfg)
    x_prev, x_curr = pair.q_prev, pair.q_curr
    if forced:
        n = Ld.n
        x_prev, x_curr = x_prev[-n:], x_curr[-n:]
    p_curr = _momentum_after(Ld, x_prev, x_curr, h, cfg, forced)
    guess = _guess(Ld, x_curr, 2 * x_curr - x_prev)
    sol, _, _ = _step(Ld, x_curr, p_curr, h, cfg, guess, forced=forced)
    return sol.nodes[-1].copy()


def initialize_from_state(
    Ld: DiscreteLagrangian, s0: StateTangent, h: float, cfg: SolverConfig | None = None
) -> DiscretePair:
    """Pair ``(q0, q1)`` with ``F^- L_d(q0, q1) = (q0, dL/dv(q0, v0))``.

    For a doubled ``L_d`` both halves start identically and the doubled
    momentum is ``(-p0, p0)``.
    """
    cfg = cfg or SolverConfig()
    p0 = legendre(Ld.system, s0).p
    forced = _use_fast(Ld, cfg)
    if forced:
        x0, pk = np.asarray(s0.q, dtype=float), p0
    else:
        x0, pk = _lift_point(Ld, s0.q), _lift_momentum(Ld, p0)
    guess = _guess(Ld, x0, x0 + h * _lift_point(Ld, s0.v)[-x0.size :])
    sol, _, _ = _step(Ld, x0, pk, h, cfg, guess, forced=forced)
    return DiscretePair(x0, sol.nodes[-1].copy(), h)


# ---------------------------------------------------------------------------
# trajectories


def integrate(
    Ld: DiscreteLagrangian,
    s0: StateTangent,
    N: int,
    h: float,
    cfg: SolverConfig | None = None,
) -> TrajectoryRecord:
    """``N`` steps of the discrete flow from continuous initial data ``s0``.

    The initial momentum is ``dL/dv(q0, v0)``, imposed through ``F^- L_d``.
    Recorded momenta are ``F^+ L_d(q_{k-1}, q_k)`` (the carried momenta);
    ``meta["p_minus"]`` holds ``F^- L_d(q_k, q_{k+1})`` and
    ``meta["momentum_matching"]`` the largest mismatch between the two.
    For doubled runs ``q, p`` are the physical ``(Q, P)`` copy and
    ``identity_defect`` is ``max |q_k - Q_k|``.

    Raises:
        NewtonDiverged: with the failing step index.
    """
    cfg = cfg or SolverConfig()
    if int(N) < 1:
        raise ValueError("N must be >= 1")
    N = int(N)
    h = float(h)
    if h < H_MIN:
        raise StepTooSmall(f"h = {h:.3e} is below {H_MIN:.0e}")
    sys = Ld.system
    n = Ld.n
    forced = _use_fast(Ld, cfg)
    full = Ld.doubled and not forced

    q0 = sys.chart.check(s0.q, "q")
    v0 = sys.chart.check(s0.v, "v")
    p0 = legendre(sys, StateTangent(q0, v0)).p
    x = _lift_point(Ld, q0) if full else q0
    pk = _lift_momentum(Ld, p0) if full else p0
    d = x.size

    xs = np.empty((N + 1, d))
    ps = np.empty((N + 1, d))
    pm = np.full((N + 1, d), np.nan)
    iters = np.zeros(N + 1, dtype=int)
    xs[0], ps[0] = x, pk
    vel = (_lift_point(Ld, v0) if full else v0)
    guess = _guess(Ld, x, x + h * vel)
    for k in range(N):
        sol, p_next, p_minus = _step(Ld, x, pk, h, cfg, guess, step=k + 1, forced=forced)
        x_next = sol.nodes[-1].copy()
        pm[k] = p_minus
        xs[k + 1], ps[k + 1], iters[k + 1] = x_next, p_next, sol.iters
        # warm start: shift the converged stage pattern by one step
        guess = sol.nodes + (x_next - x)[None, :]
        x, pk = x_next, p_next

    if full:
        q, p = xs[:, n:], ps[:, n:]
        defect = np.max(np.abs(xs[:, :n] - xs[:, n:]), axis=1)
    else:
        q, p = xs, ps
        defect = np.zeros(N + 1)
    v = np.array([legendre_inverse(sys, a, b) for a, b in zip(q, p)])
    E = np.array([energy_value(sys, a, b) for a, b in zip(q, v)])
    matching = float(np.max(np.abs(pm[:N] - ps[:N]))) if N else 0.0
    t = h * np.arange(N + 1)
    return TrajectoryRecord(
        t=t,
        q=q.copy(),
        p=p.copy(),
        v=v,
        energy=E,
        identity_defect=defect,
        newton_iters=iters,
        method=Ld.name,
        h=h,
        meta={
            "mode": "full" if full else ("fast" if forced else "single"),
            "p_minus": pm[:, n:] if full else pm,
            "momentum_matching": matching,
            "doubled_states": xs if full else None,
            "doubled_momenta": ps if full else None,
        },
    )


def step_map_jacobian(Ld: DiscreteLagrangian, q, p, h: float, cfg: SolverConfig | None = None) -> np.ndarray:
    """Jacobian of the discrete Hamiltonian map ``(q_k, p_k) -> (q_{k+1}, p_{k+1})``.

    Implicit differentiation of the step equations using exact Hessians of
    the action (single-copy ``L_d``).
    """
    cfg = cfg or SolverConfig()
    if Ld.doubled:
        raise ValueError("step_map_jacobian acts on the single-copy discrete Lagrangian")
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    n, s = Ld.n, Ld.n_nodes
    guess = _guess(Ld, q, q + h * legendre_inverse(Ld.system, q, p))
    sol, _, _ = _step(Ld, q, p, h, cfg, guess)
    g, H = Ld.grad_hess(sol.nodes, h)
    rows = list(range(0, s - 1))
    cols = list(range(1, s))
    Jz = H[rows][:, :, cols, :].reshape((s - 1) * n, (s - 1) * n)
    Rq = H[rows][:, :, 0, :].reshape((s - 1) * n, n)
    Rp = np.zeros(((s - 1) * n, n))
    Rp[:n] = np.eye(n)
    dz = -np.linalg.solve(Jz, np.hstack([Rq, Rp]))  # d(unknowns)/d(q, p)
    dq_next = dz[-n:]
    dp_next = np.hstack([H[s - 1, :, 0, :], np.zeros((n, n))]) + H[s - 1][:, cols, :].reshape(
        n, (s - 1) * n
    ) @ dz
    return np.vstack([dq_next, dp_next])
