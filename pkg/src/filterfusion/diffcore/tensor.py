"""Reverse-mode automatic differentiation on dense float64 tensors.

A Tape records one forward pass (define-by-run); ``backward`` consumes the
tape in a single reverse sweep, which is automatically reverse-topological
because entries are appended in execution order.  Broadcasting is
deliberately restricted: operands must have identical shapes, or one must
be a single-element tensor, or one shape must extend the other by leading
batch dimensions.  Anything richer is rejected so shape bugs in filter
algebra fail loudly instead of silently broadcasting.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "Tensor", "Tape", "no_grad", "backward", "gradients", "zero_grad",
    "tensor", "zeros", "ones", "eye", "full",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape",
    "concat", "gather_rows", "tsum", "tmean", "relu", "relu_mask",
    "sigmoid", "tanh", "exp", "log", "softplus", "softmax", "logsumexp",
    "outer", "diag", "diagonal", "cholesky", "solve_triangular",
    "chol_spd", "spd_solve", "gaussian_logpdf_diag", "gaussian_logpdf_full",
    "LOG_2PI",
]

LOG_2PI = math.log(2.0 * math.pi)

_grad_enabled = True
_active_tape: "Tape | None" = None


class TapeEntry:
    """One recorded operation: op kind, tracked input ids, output id, vjps."""

    __slots__ = ("op", "input_ids", "vjps", "output_id")

    def __init__(self, op, input_ids, vjps, output_id):
        self.op = op
        self.input_ids = input_ids
        self.vjps = vjps
        self.output_id = output_id


class Tape:
    """Recording of a single forward pass.

    Node ids are assigned in creation order, so every input id precedes
    its consumers and one reversed sweep of ``entries`` is a valid
    backward pass.  A tape is consumed by ``backward`` and never reused.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.leaves: dict[int, "Tensor"] = {}
        self._next_id = 0
        self.consumed = False

    def new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def register_leaf(self, t: "Tensor") -> None:
        t._tape = self
        t._node = self.new_id()
        self.leaves[t._node] = t

    def record(self, op: str, input_ids, vjps, output_id: int) -> None:
        self.entries.append(TapeEntry(op, input_ids, vjps, output_id))


def _current_tape() -> Tape:
    global _active_tape
    if _active_tape is None or _active_tape.consumed:
        _active_tape = Tape()
    return _active_tape


def reset_tape() -> None:
    """Drop the active tape without running backward.

    Forward passes whose gradients are never consumed would otherwise keep
    accumulating entries on the shared tape.
    """
    global _active_tape
    _active_tape = None


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        return _pow(self, float(p))

    def __getitem__(self, key):
        return _getitem(self, key)

    def __hash__(self):
        return id(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


def full(shape, value) -> Tensor:
    return Tensor(np.full(shape, float(value)))


def eye(n: int) -> Tensor:
    return Tensor(np.eye(n))


# ---------------------------------------------------------------------------
# recording machinery


def _is_tracked(t: Tensor) -> bool:
    if t.requires_grad:
        return True
    tape = _active_tape
    return (
        tape is not None
        and not tape.consumed
        and t._tape is tape
        and t._node is not None
    )


def _apply(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           vjps: Sequence[Callable[[np.ndarray], np.ndarray] | None]) -> Tensor:
    out = Tensor(out_data)
    if not _grad_enabled or not any(_is_tracked(t) for t in inputs):
        return out
    tape = _current_tape()
    input_ids = []
    for t, vjp in zip(inputs, vjps):
        nid = None
        if vjp is not None:
            if t.requires_grad and (t._tape is not tape or t._node is None):
                tape.register_leaf(t)
            if t._tape is tape:
                nid = t._node
        input_ids.append(nid)
    out._tape = tape
    out._node = tape.new_id()
    tape.record(op, input_ids, vjps, out._node)
    return out


def _sweep(tape: Tape, seeds: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Reverse sweep over the tape; visits each recorded node exactly once."""
    grads = dict(seeds)
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output_id, None)
        if g is None:
            continue
        for nid, vjp in zip(entry.input_ids, entry.vjps):
            if nid is None:
                continue
            contrib = vjp(g)
            if nid in grads:
                grads[nid] = grads[nid] + contrib
            else:
                grads[nid] = contrib
    return grads


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    The tape is consumed: calling backward twice on the same forward pass
    raises, and the next recorded op starts a fresh tape.
    """
    global _active_tape
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss._node is None:
        raise RuntimeError("loss is not on a tape (no tracked inputs, or grad disabled)")
    if tape.consumed:
        raise RuntimeError("tape already consumed by backward; rebuild the forward pass")
    grads = _sweep(tape, {loss._node: np.ones_like(loss.data)})
    tape.consumed = True
    if _active_tape is tape:
        _active_tape = None
    out: dict[Tensor, np.ndarray] = {}
    for nid, leaf in tape.leaves.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


def gradients(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar output without consuming the tape.

    Used for repeated reverse sweeps over one forward pass (e.g. Jacobian
    rows).  Does not touch ``.grad``.
    """
    if output.size != 1:
        raise ValueError(f"gradients needs a scalar output, got shape {output.shape}")
    tape = output._tape
    if tape is None or output._node is None:
        raise RuntimeError("output is not on a tape")
    grads = _sweep(tape, {output._node: np.ones_like(output.data)})
    out = []
    for t in wrt:
        if t._tape is tape and t._node is not None and t._node in grads:
            out.append(grads[t._node])
        else:
            out.append(np.zeros_like(t.data))
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# broadcasting rules: equal shapes, single-element, or leading batch dims


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ValueError(
        f"{op}: shapes {sa} and {sb} are not compatible "
        "(equal, single-element, or leading-batch broadcasting only)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == () or int(np.prod(shape)) == 1:
        return np.sum(g).reshape(shape)
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("add", a, b)
    return _apply("add", (a, b), a.data + b.data,
                  (lambda g: _unbroadcast(g, a.shape),
                   lambda g: _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("sub", a, b)
    return _apply("sub", (a, b), a.data - b.data,
                  (lambda g: _unbroadcast(g, a.shape),
                   lambda g: _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("mul", a, b)
    ad, bd = a.data, b.data
    return _apply("mul", (a, b), ad * bd,
                  (lambda g: _unbroadcast(g * bd, a.shape),
                   lambda g: _unbroadcast(g * ad, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("div", a, b)
    ad, bd = a.data, b.data
    return _apply("div", (a, b), ad / bd,
                  (lambda g: _unbroadcast(g / bd, a.shape),
                   lambda g: _unbroadcast(-g * ad / (bd * bd), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _apply("neg", (a,), -a.data, (lambda g: -g,))


def _pow(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _apply("pow", (a,), ad ** p, (lambda g: g * p * ad ** (p - 1.0),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if a.ndim == 2 and b.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
        return _apply("matmul", (a, b), ad @ bd,
                      (lambda g: g @ bd.T, lambda g: ad.T @ g))
    if a.ndim == 2 and b.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
        return _apply("matmul", (a, b), ad @ bd,
                      (lambda g: np.outer(g, bd), lambda g: ad.T @ g))
    if a.ndim == 1 and b.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ValueError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
        return _apply("matmul", (a, b), ad @ bd,
                      (lambda g: bd @ g, lambda g: np.outer(ad, g)))
    if a.ndim == 1 and b.ndim == 1:
        if ad.shape[0] != bd.shape[0]:
            raise ValueError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
        return _apply("matmul", (a, b), ad @ bd,
                      (lambda g: g * bd, lambda g: g * ad))
    raise ValueError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    return _apply("transpose", (a,), a.data.T.copy(), (lambda g: g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _apply("reshape", (a,), a.data.reshape(shape).copy(),
                  (lambda g: g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]
        return vjp

    return _apply("concat", tuple(parts), out,
                  tuple(make_vjp(i) for i in range(len(parts))))


def _getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out, dtype=np.float64)
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape)
        z[key] = g
        return z

    return _apply("slice", (a,), np.array(out, copy=True), (vjp,))


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows by index; backward scatter-adds (duplicates accumulate)."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return z

    return _apply("gather_rows", (a,), a.data[idx].copy(), (vjp,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, ad.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, ad.shape).copy()

    return _apply("sum", (a,), np.sum(ad, axis=axis, keepdims=keepdims), (vjp,))


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    if axis is None:
        count = ad.size
    elif isinstance(axis, tuple):
        count = int(np.prod([ad.shape[i] for i in axis]))
    else:
        count = ad.shape[axis]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / count, ad.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg / count, ad.shape).copy()

    return _apply("mean", (a,), np.mean(ad, axis=axis, keepdims=keepdims), (vjp,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _apply("relu", (a,), np.where(mask, a.data, 0.0), (lambda g: g * mask,))


def relu_mask(a: Tensor) -> Tensor:
    """Indicator of the positive part, as a constant (zero-derivative) tensor."""
    return Tensor((a.data > 0).astype(np.float64))


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    return _apply("sigmoid", (a,), s, (lambda g: g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _apply("tanh", (a,), t, (lambda g: g * (1.0 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _apply("exp", (a,), e, (lambda g: g * e,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore"):
        out = np.log(ad)
    return _apply("log", (a,), out, (lambda g: g / ad,))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    # log(1+e^x) = max(x,0) + log1p(e^{-|x|}), stable for large |x|
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-ad))
    return _apply("softplus", (a,), out, (lambda g: g * s,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    m = np.max(ad, axis=axis, keepdims=True)
    e = np.exp(ad - m)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return y * (g - np.sum(g * y, axis=axis, keepdims=True))

    return _apply("softmax", (a,), y, (vjp,))


def logsumexp(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    m = np.max(ad, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore"):
        e = np.exp(ad - m)
    s = np.sum(e, axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out_kd = m + np.log(s)
    out = out_kd if keepdims else np.squeeze(out_kd, axis=axis) if axis is not None else out_kd.reshape(())

    def vjp(g):
        soft = e / s
        if axis is None:
            return np.broadcast_to(g, ad.shape) * soft
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, ad.shape) * soft

    return _apply("logsumexp", (a,), np.asarray(out), (vjp,))


def outer(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError(f"outer expects vectors, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _apply("outer", (a, b), np.outer(ad, bd),
                  (lambda g: g @ bd, lambda g: g.T @ ad))


def diag(v: Tensor) -> Tensor:
    if v.ndim != 1:
        raise ValueError(f"diag expects a vector, got shape {v.shape}")
    return _apply("diag", (v,), np.diag(v.data), (lambda g: np.diagonal(g).copy(),))


def diagonal(m: Tensor) -> Tensor:
    if m.ndim != 2:
        raise ValueError(f"diagonal expects a matrix, got shape {m.shape}")
    n = m.shape[0]

    def vjp(g):
        z = np.zeros((n, m.shape[1]))
        np.fill_diagonal(z, g)
        return z

    return _apply("diagonal", (m,), np.diagonal(m.data).copy(), (vjp,))


# ---------------------------------------------------------------------------
# linear algebra for SPD matrices


def cholesky(a: Tensor) -> Tensor:
    """Lower Cholesky factor of an SPD matrix; raises LinAlgError if not SPD."""
    L = np.linalg.cholesky(a.data)

    def vjp(g):
        # Murray (2016); same form as the autograd reference implementation.
        n = L.shape[0]
        phi = np.tril(L.T @ g)
        phi[np.diag_indices(n)] *= 0.5
        tmp = scipy.linalg.solve_triangular(L, phi.T, lower=True, trans="T")
        s = scipy.linalg.solve_triangular(L, tmp.T, lower=True, trans="T")
        return (s + s.T) / 2.0

    return _apply("cholesky", (a,), L, (vjp,))


def solve_triangular(a: Tensor, b: Tensor, lower: bool = True,
                     trans: bool = False) -> Tensor:
    """Solve ``a x = b`` (or ``aᵀ x = b`` when trans) with triangular ``a``."""
    ad = a.data
    vec = b.ndim == 1
    bd = b.data.reshape(-1, 1) if vec else b.data
    x = scipy.linalg.solve_triangular(ad, bd, lower=lower, trans="T" if trans else "N")
    mask = np.tril(np.ones_like(ad)) if lower else np.triu(np.ones_like(ad))

    def vjp_b(g):
        gg = g.reshape(-1, 1) if vec else g
        gb = scipy.linalg.solve_triangular(ad, gg, lower=lower,
                                           trans="N" if trans else "T")
        return gb.reshape(b.shape)

    def vjp_a(g):
        gg = g.reshape(-1, 1) if vec else g
        gb = scipy.linalg.solve_triangular(ad, gg, lower=lower,
                                           trans="N" if trans else "T")
        if trans:
            ga = -x @ gb.T
        else:
            ga = -gb @ x.T
        return ga * mask

    out = x.reshape(b.shape)
    return _apply("solve_triangular", (a, b), out, (vjp_a, vjp_b))


def chol_spd(a: Tensor, jitters: tuple = (1e-9, 1e-6)) -> Tensor:
    """Cholesky with a jitter ladder: add jitters[k]*I, escalating on failure.

    Learned covariances can be near-singular early in training; the default
    ladder adds 1e-9*I up front and retries with 1e-6*I. Callers that need
    exact algebra on matrices already known to be SPD prepend 0.0.
    """
    n = a.shape[0]
    for k, jitter in enumerate(jitters):
        ridged = a if jitter == 0.0 else add(a, mul(Tensor(jitter), eye(n)))
        try:
            return cholesky(ridged)
        except np.linalg.LinAlgError:
            if k == len(jitters) - 1:
                raise RuntimeError(
                    f"matrix is not positive definite even with jitter {jitter}")
    raise RuntimeError("empty jitter ladder")


def spd_solve(a: Tensor, b: Tensor, **jitter_kw) -> Tensor:
    """Solve ``a x = b`` for SPD ``a`` via Cholesky and two triangular solves."""
    L = chol_spd(a, **jitter_kw)
    y = solve_triangular(L, b, lower=True, trans=False)
    return solve_triangular(L, y, lower=True, trans=True)


# ---------------------------------------------------------------------------
# Gaussian log-densities


def gaussian_logpdf_diag(x: Tensor, mean: Tensor, var: Tensor) -> Tensor:
    """log N(x; mean, diag(var)); batched over a leading dim of x/mean."""
    d = sub(x, mean)
    q = tsum(div(mul(d, d), var), axis=-1)
    logdet = tsum(log(var))
    k = x.shape[-1]
    return mul(Tensor(-0.5), add(add(q, logdet), Tensor(k * LOG_2PI)))


def gaussian_logpdf_full(x: Tensor, mean: Tensor, cov: Tensor) -> Tensor:
    """log N(x; mean, cov) with full SPD covariance.

    ``x`` may be a vector or a (batch, n) matrix sharing one covariance.
    """
    d = sub(x, mean)
    L = chol_spd(cov)
    n = cov.shape[0]
    if d.ndim == 1:
        alpha = solve_triangular(L, d, lower=True)
        q = tsum(mul(alpha, alpha))
    else:
        alpha = solve_triangular(L, transpose(d), lower=True)
        q = tsum(mul(alpha, alpha), axis=0)
    logdet = mul(Tensor(2.0), tsum(log(diagonal(L))))
    return mul(Tensor(-0.5), add(add(q, logdet), Tensor(n * LOG_2PI)))
