"""Forward-mode automatic differentiation with first- and second-order duals.

A :class:`Dual` carries a value array together with the derivatives of every
entry with respect to ``m`` seed variables::

    val   shape S
    grad  shape S + (m,)
    hess  shape S + (m, m)     (None for first-order duals)

Entries of ``S`` are independent, so a single Dual can hold a whole batch of
evaluation points.  Vectors follow a *coordinate-first* layout: a point of
``R^n`` evaluated at ``k`` quadrature nodes is stored with shape ``(n, k)``.
User functions that index coordinates as ``q[0]``, form ``M @ v`` or reduce
with ``np.sum(x, axis=0)`` therefore broadcast over trailing batch axes for
free.

NumPy ufuncs (``np.sin``, ``np.exp``, ...) and a handful of array functions
(``np.sum``, ``np.stack``, ``np.concatenate``, ``np.dot``) dispatch to Dual
through the ``__array_ufunc__``/``__array_function__`` protocols.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NonFinite

__all__ = [
    "Dual",
    "seed",
    "value_of",
    "gradient",
    "hessian",
    "jacobian",
    "value_grad_hess",
    "stack",
    "dot",
]


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def _fit(arr: np.ndarray | None, shape: tuple, extra: int) -> np.ndarray | None:
    """Broadcast derivative storage so its leading axes match ``shape``."""
    if arr is None:
        return None
    lead = arr.shape[: arr.ndim - extra]
    if lead == shape:
        return arr
    return np.broadcast_to(arr, shape + arr.shape[arr.ndim - extra :])


class Dual:
    """Array-valued truncated Taylor number (value, gradient, optional Hessian)."""

    __slots__ = ("val", "grad", "hess")
    __array_priority__ = 1000.0

    def __init__(self, val, grad, hess=None):
        self.val = _as_array(val)
        self.grad = grad
        self.hess = hess

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.val.shape

    @property
    def ndim(self) -> int:
        return self.val.ndim

    @property
    def nvars(self) -> int:
        return self.grad.shape[-1]

    @property
    def order(self) -> int:
        return 1 if self.hess is None else 2

    def __len__(self) -> int:
        return len(self.val)

    def __repr__(self) -> str:
        return f"Dual(val={self.val!r}, order={self.order}, nvars={self.nvars})"

    def __getitem__(self, idx) -> "Dual":
        if isinstance(idx, tuple) and any(i is Ellipsis for i in idx):
            raise IndexError("Ellipsis indexing is not supported on Dual")
        h = None if self.hess is None else self.hess[idx]
        return _new(self.val[idx], self.grad[idx], h)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(other))

    def __rsub__(self, other):
        return _add(_neg(self), other)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return _mul(self, _reciprocal(other))
        return _mul(self, 1.0 / _as_array(other))

    def __rtruediv__(self, other):
        return _mul(_reciprocal(self), other)

    def __neg__(self):
        return _neg(self)

    def __pos__(self):
        return self

    def __pow__(self, other):
        return _power(self, other)

    def __rpow__(self, other):
        return _exp(_mul(self, np.log(_as_array(other))))

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    def __abs__(self):
        s = np.sign(self.val)
        return _chain(self, np.abs(self.val), s, np.zeros_like(s))

    # Comparisons act on values only; branchy user code stays differentiable
    # away from the branch points.
    def __lt__(self, other):
        return self.val < value_of(other)

    def __le__(self, other):
        return self.val <= value_of(other)

    def __gt__(self, other):
        return self.val > value_of(other)

    def __ge__(self, other):
        return self.val >= value_of(other)

    def __float__(self):
        return float(self.val)

    # -- reductions and reshaping -----------------------------------------
    def sum(self, axis=None, out=None, **kwargs):
        if out is not None:
            raise TypeError("Dual.sum does not support out=")
        if axis is None:
            axes = tuple(range(self.ndim))
        else:
            axes = tuple(a % self.ndim for a in np.atleast_1d(axis))
        h = None if self.hess is None else self.hess.sum(axis=axes)
        return Dual(self.val.sum(axis=axes), self.grad.sum(axis=axes), h)

    def reshape(self, *shape) -> "Dual":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        val = self.val.reshape(shape)
        m = self.nvars
        h = None if self.hess is None else self.hess.reshape(val.shape + (m, m))
        return Dual(val, self.grad.reshape(val.shape + (m,)), h)

    # -- numpy protocols ---------------------------------------------------
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs.get("out") is not None:
            return NotImplemented
        impl = _UFUNCS.get(ufunc)
        if impl is None:
            return NotImplemented
        return impl(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        impl = _FUNCTIONS.get(func)
        if impl is None:
            return NotImplemented
        return impl(*args, **kwargs)


# ---------------------------------------------------------------------------
# primitive rules


def _new(val, grad, hess) -> Dual:
    d = object.__new__(Dual)
    d.val = val
    d.grad = grad
    d.hess = hess
    return d


def value_of(x):
    """Strip derivative information, returning a plain ndarray (or scalar)."""
    return x.val if isinstance(x, Dual) else x


def _neg(a):
    if isinstance(a, Dual):
        h = None if a.hess is None else -a.hess
        return _new(-a.val, -a.grad, h)
    return -_as_array(a)


def _add(a, b):
    if not isinstance(a, Dual):
        a, b = b, a
    if isinstance(b, Dual):
        val = a.val + b.val
        grad = _fit(a.grad, val.shape, 1) + _fit(b.grad, val.shape, 1)
        if a.hess is None or b.hess is None:
            return _new(val, grad, None)
        return _new(val, grad, _fit(a.hess, val.shape, 2) + _fit(b.hess, val.shape, 2))
    if isinstance(b, (float, int)):
        return _new(a.val + b, a.grad, a.hess)
    val = a.val + _as_array(b)
    return _new(val, _fit(a.grad, val.shape, 1), _fit(a.hess, val.shape, 2))


def _mul(a, b):
    if not isinstance(a, Dual):
        a, b = b, a
    if isinstance(b, (float, int)):
        return _new(a.val * b, a.grad * b, None if a.hess is None else a.hess * b)
    if isinstance(b, Dual):
        if b is a:
            return _square(a)
        av, bv = a.val, b.val
        ag, bg = a.grad, b.grad
        grad = ag * bv[..., None] + bg * av[..., None]
        hess = None
        if a.hess is not None and b.hess is not None:
            cross = ag[..., :, None] * bg[..., None, :]
            hess = (
                a.hess * bv[..., None, None]
                + b.hess * av[..., None, None]
                + cross
                + np.swapaxes(cross, -1, -2)
            )
        return _new(av * bv, grad, hess)
    c = _as_array(b)
    h = None if a.hess is None else a.hess * c[..., None, None]
    return _new(a.val * c, a.grad * c[..., None], h)


def _chain(a: Dual, f0, f1, f2) -> Dual:
    """Compose a scalar function with value f0 and derivatives f1, f2."""
    grad = a.grad * f1[..., None]
    hess = None
    if a.hess is not None:
        hess = a.hess * f1[..., None, None] + (
            f2[..., None, None] * a.grad[..., :, None] * a.grad[..., None, :]
        )
    return _new(f0, grad, hess)


def _reciprocal(a: Dual) -> Dual:
    inv = 1.0 / a.val
    return _chain(a, inv, -inv * inv, 2.0 * inv * inv * inv)


def _power(a, b):
    if isinstance(b, Dual):
        if not isinstance(a, Dual):
            return _exp(_mul(b, np.log(_as_array(a))))
        return _exp(_mul(b, _log(a)))
    if not isinstance(a, Dual):
        return np.power(a, b)
    p = _as_array(b)
    if p.ndim == 0:
        if p == 2.0:
            return _square(a)
        if p == 1.0:
            return a
        if p == 0.0:
            return _chain(a, np.ones_like(a.val), np.zeros_like(a.val), np.zeros_like(a.val))
    x = a.val
    return _chain(a, x**p, p * x ** (p - 1.0), p * (p - 1.0) * x ** (p - 2.0))


def _exp(a):
    if not isinstance(a, Dual):
        return np.exp(a)
    e = np.exp(a.val)
    return _chain(a, e, e, e)


def _log(a):
    if not isinstance(a, Dual):
        return np.log(a)
    inv = 1.0 / a.val
    return _chain(a, np.log(a.val), inv, -inv * inv)


def _sqrt(a):
    if not isinstance(a, Dual):
        return np.sqrt(a)
    r = np.sqrt(a.val)
    return _chain(a, r, 0.5 / r, -0.25 / (r * a.val))


def _sin(a):
    if not isinstance(a, Dual):
        return np.sin(a)
    s, c = np.sin(a.val), np.cos(a.val)
    return _chain(a, s, c, -s)


def _cos(a):
    if not isinstance(a, Dual):
        return np.cos(a)
    s, c = np.sin(a.val), np.cos(a.val)
    return _chain(a, c, -s, -c)


def _tan(a):
    if not isinstance(a, Dual):
        return np.tan(a)
    t = np.tan(a.val)
    sec2 = 1.0 + t * t
    return _chain(a, t, sec2, 2.0 * t * sec2)


def _sinh(a):
    if not isinstance(a, Dual):
        return np.sinh(a)
    s, c = np.sinh(a.val), np.cosh(a.val)
    return _chain(a, s, c, s)


def _cosh(a):
    if not isinstance(a, Dual):
        return np.cosh(a)
    s, c = np.sinh(a.val), np.cosh(a.val)
    return _chain(a, c, s, c)


def _tanh(a):
    if not isinstance(a, Dual):
        return np.tanh(a)
    t = np.tanh(a.val)
    d = 1.0 - t * t
    return _chain(a, t, d, -2.0 * t * d)


def _arctan(a):
    if not isinstance(a, Dual):
        return np.arctan(a)
    x = a.val
    d = 1.0 / (1.0 + x * x)
    return _chain(a, np.arctan(x), d, -2.0 * x * d * d)


def _square(a):
    if not isinstance(a, Dual):
        return np.square(a)
    v = a.val
    g = a.grad
    grad = g * (2.0 * v)[..., None]
    hess = None
    if a.hess is not None:
        hess = 2.0 * (a.hess * v[..., None, None] + g[..., :, None] * g[..., None, :])
    return _new(v * v, grad, hess)


def _matmul(a, b):
    """Coordinate-first matrix products.

    ``M @ x`` contracts the last axis of ``M`` with the first axis of ``x``;
    ``x @ M`` contracts the first axes of both; ``x @ y`` for two Duals sums
    ``x * y`` over the first axis.
    """
    if isinstance(a, Dual) and isinstance(b, Dual):
        return _mul(a, b).sum(axis=0)
    if isinstance(b, Dual):
        mat = _as_array(a)
        axes = ([mat.ndim - 1], [0])
    else:
        mat = _as_array(b)
        b = a
        axes = ([0], [0])
        mat = mat.T if mat.ndim == 2 else mat
        axes = ([mat.ndim - 1], [0])
    val = np.tensordot(mat, b.val, axes=axes)
    grad = np.tensordot(mat, b.grad, axes=axes)
    hess = None if b.hess is None else np.tensordot(mat, b.hess, axes=axes)
    return Dual(val, grad, hess)


def _lift(items) -> list:
    duals = [x for x in items if isinstance(x, Dual)]
    if not duals:
        return list(items)
    m = duals[0].nvars
    second = all(d.hess is not None for d in duals)
    out = []
    for x in items:
        if isinstance(x, Dual):
            out.append(x if second or x.hess is None else Dual(x.val, x.grad))
        else:
            v = _as_array(x)
            out.append(
                Dual(v, np.zeros(v.shape + (m,)), np.zeros(v.shape + (m, m)) if second else None)
            )
    return out


def stack(items, axis: int = 0):
    """``np.stack`` that accepts any mix of floats, arrays and Duals."""
    items = _lift(list(items))
    if not any(isinstance(x, Dual) for x in items):
        return np.stack([_as_array(x) for x in items], axis=axis)
    nd = items[0].ndim + 1
    ax = axis % nd
    val = np.stack([x.val for x in items], axis=ax)
    grad = np.stack([x.grad for x in items], axis=ax)
    hess = None
    if items[0].hess is not None:
        hess = np.stack([x.hess for x in items], axis=ax)
    return Dual(val, grad, hess)


def _concatenate(items, axis: int = 0, **kwargs):
    items = _lift(list(items))
    if not any(isinstance(x, Dual) for x in items):
        return np.concatenate([_as_array(x) for x in items], axis=axis)
    ax = axis % items[0].ndim
    val = np.concatenate([x.val for x in items], axis=ax)
    grad = np.concatenate([x.grad for x in items], axis=ax)
    hess = None
    if items[0].hess is not None:
        hess = np.concatenate([x.hess for x in items], axis=ax)
    return Dual(val, grad, hess)


def dot(a, b):
    """Pairing of two coordinate-first vectors (sum over the first axis)."""
    if isinstance(a, Dual) or isinstance(b, Dual):
        return _mul(a, b).sum(axis=0)
    return np.sum(_as_array(a) * _as_array(b), axis=0)


def _np_sum(a, axis=None, **kwargs):
    return a.sum(axis=axis) if isinstance(a, Dual) else np.sum(a, axis=axis)


def _np_dot(a, b, out=None):
    a_is, b_is = isinstance(a, Dual), isinstance(b, Dual)
    if a_is and b_is:
        return dot(a, b)
    mat = b if a_is else a
    if np.ndim(mat) == 1:
        return dot(a, b)
    return _matmul(a, b)


_UFUNCS = {
    np.add: _add,
    np.subtract: lambda a, b: _add(a, _neg(b)),
    np.multiply: _mul,
    np.true_divide: lambda a, b: a / b if isinstance(a, Dual) else Dual.__rtruediv__(b, a),
    np.negative: _neg,
    np.positive: lambda a: a,
    np.power: _power,
    np.square: _square,
    np.sqrt: _sqrt,
    np.exp: _exp,
    np.log: _log,
    np.sin: _sin,
    np.cos: _cos,
    np.tan: _tan,
    np.sinh: _sinh,
    np.cosh: _cosh,
    np.tanh: _tanh,
    np.arctan: _arctan,
    np.reciprocal: _reciprocal,
    np.matmul: _matmul,
    np.absolute: abs,
}

_FUNCTIONS = {
    np.sum: _np_sum,
    np.stack: stack,
    np.concatenate: _concatenate,
    np.dot: _np_dot,
}


# ---------------------------------------------------------------------------
# seeding and drivers


def seed(x, order: int = 2) -> Dual:
    """Independent variables for a coordinate-first array ``x`` of shape (m, *B).

    Entry ``x[i, b]`` is seeded as variable ``i`` for every batch index ``b``.
    """
    x = _as_array(x)
    m = x.shape[0]
    eye = np.eye(m).reshape((m,) + (1,) * (x.ndim - 1) + (m,))
    grad = np.broadcast_to(eye, x.shape + (m,)).copy()
    hess = np.zeros(x.shape + (m, m)) if order >= 2 else None
    return Dual(x.copy(), grad, hess)


def _check_finite(*arrays) -> None:
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise NonFinite("non-finite value or derivative")


def _evaluate(f: Callable, x, order: int):
    x = _as_array(x)
    if x.ndim != 1:
        raise ValueError("expected a 1-D input vector")
    y = f(seed(x, order))
    if not isinstance(y, Dual):
        y = _lift([y, seed(x, order)])[0]
    return y


def gradient(f: Callable, x) -> np.ndarray:
    """Exact gradient of a scalar function ``f`` at ``x``."""
    y = _evaluate(f, x, 1)
    if y.ndim != 0:
        raise ValueError("gradient() needs a scalar-valued function")
    _check_finite(y.val, y.grad)
    return np.array(y.grad)


def hessian(f: Callable, x) -> np.ndarray:
    """Exact Hessian of a scalar function ``f`` at ``x``."""
    return value_grad_hess(f, x)[2]


def value_grad_hess(f: Callable, x) -> tuple[float, np.ndarray, np.ndarray]:
    y = _evaluate(f, x, 2)
    if y.ndim != 0:
        raise ValueError("hessian() needs a scalar-valued function")
    _check_finite(y.val, y.grad, y.hess)
    return float(y.val), np.array(y.grad), np.array(y.hess)


def jacobian(g: Callable, x) -> np.ndarray:
    """Exact Jacobian (rows = outputs) of a vector function ``g`` at ``x``."""
    x = _as_array(x)
    y = g(seed(x, 1))
    if isinstance(y, (list, tuple)):
        y = stack(y)
    if not isinstance(y, Dual):
        return np.zeros(np.shape(y) + (x.size,))
    _check_finite(y.val, y.grad)
    return np.array(y.grad)
