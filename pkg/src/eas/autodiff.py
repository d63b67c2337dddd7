"""Reverse-mode automatic differentiation over dense numpy arrays.

Define-by-run: every operation returns a new :class:`Tensor` that remembers
its inputs and a closure computing input gradients from its own gradient.
``backward`` walks the recorded graph once, in reverse topological order.

Conventions:
  * float32 by default; ops follow numpy promotion so a graph built from
    float64 leaves runs entirely in float64 (used by ``gradient_check``).
  * images are NCHW.
  * stochastic ops never sample internally; noise is passed in as data.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import GraphError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents",
                 "_backward", "_needs", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 op: str | None = None, dtype=np.float32):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if not isinstance(data, np.ndarray) else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._needs = requires_grad
        self._backward_ran = False

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="const")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.name or self.op or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_as_np(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self, params=None):
        return backward(self, params)


def _as_np(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def _coerce(value, like: Tensor) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), op="const")


def _make(data: np.ndarray, op: str, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(data, op=op)
    needs = _GRAD_ENABLED and any(p._needs for p in parents)
    if needs:
        out._parents = parents
        out._backward = backward_fn
        out._needs = True
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(parent: Tensor, grad: np.ndarray):
    if not parent._needs:
        return
    if parent.grad is None:
        parent.grad = np.zeros_like(parent.data)
    parent.grad += grad


# -- elementwise arithmetic --------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError("add", str(exc)) from None

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(data, "add", (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError("mul", str(exc)) from None

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, "mul", (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, "div", (a, b), bwd)


def power(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    data = a.data ** np.asarray(e, dtype=a.dtype)

    def bwd(g):
        _accum(a, g * e * a.data ** np.asarray(e - 1.0, dtype=a.dtype))

    return _make(data, "pow", (a,), bwd)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(data, "log", (a,), bwd)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * data)

    return _make(data, "exp", (a,), bwd)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_np(a.data)

    def bwd(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, "sigmoid", (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - data * data))

    return _make(data, "tanh", (a,), bwd)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return _make(data, "relu", (a,), bwd)


def hardswish(a: Tensor) -> Tensor:
    """x * clip(x + 3, 0, 6) / 6, the MobileNetV3-family nonlinearity."""
    x = a.data
    data = x * np.clip(x + 3.0, 0.0, 6.0) / 6.0

    def bwd(g):
        slope = np.where(x <= -3.0, 0.0, np.where(x >= 3.0, 1.0, (2.0 * x + 3.0) / 6.0))
        _accum(a, g * slope.astype(x.dtype))

    return _make(data, "hardswish", (a,), bwd)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select by a constant boolean mask; gradients route to the chosen side."""
    cond = np.asarray(cond, dtype=bool)
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    ref = a_t or b_t
    if ref is None:
        return Tensor(np.where(cond, a, b), op="where")
    data = np.where(cond, _as_np(a), np.asarray(_as_np(b), dtype=ref.dtype))
    parents = tuple(t for t in (a_t, b_t) if t is not None)

    def bwd(g):
        if a_t is not None:
            _accum(a_t, _unbroadcast(np.where(cond, g, 0.0), a_t.shape))
        if b_t is not None:
            _accum(b_t, _unbroadcast(np.where(cond, 0.0, g), b_t.shape))

    return _make(data, "where", parents, bwd)


def ste_gate(soft: Tensor, threshold: float = 0.5) -> Tensor:
    """Hard 0/1 threshold on the forward path, identity on the backward path.

    The straight-through estimator: the returned value is binary, but its
    gradient w.r.t. ``soft`` is taken to be 1.  ``gradient_check`` flags
    graphs containing this op since it is an estimator by construction.
    """
    data = (soft.data > threshold).astype(soft.dtype)

    def bwd(g):
        _accum(soft, g)

    return _make(data, "hard_gate", (soft,), bwd)


# -- reductions / reshaping ---------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False) * np.ones((), dtype=a.dtype))
        else:
            g2 = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g2, a.shape).copy())

    return _make(np.asarray(data), "sum", (a,), bwd)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def bwd(g):
        if axis is None:
            g2 = g
        else:
            g2 = g if keepdims else np.expand_dims(g, axis)
        _accum(a, (np.broadcast_to(g2, a.shape) / np.asarray(count, dtype=a.dtype)).astype(a.dtype, copy=False))

    return _make(np.asarray(data), "mean", (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, "reshape", (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _make(data, "transpose", (a,), bwd)


def getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        _accum(a, full)

    return _make(data, "slice", (a,), bwd)


def take_rows(a: Tensor, indices) -> Tensor:
    """Row gather (embedding lookup); repeated indices accumulate gradients."""
    indices = np.asarray(indices, dtype=np.int64)
    data = a.data[indices]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        _accum(a, full)

    return _make(data, "take_rows", (a,), bwd)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, beg, end in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(beg, end)
            _accum(t, g[tuple(sl)])

    return _make(data, "concat", tuple(tensors), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"incompatible shapes {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a._needs:
            _accum(a, g @ b.data.T)
        if b._needs:
            _accum(b, a.data.T @ g)

    return _make(data, "matmul", (a, b), bwd)


# -- convolutions --------------------------------------------------------------

def _im2col_strided(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Vectorized patch extraction from the padded input, (N*OH*OW, C*kh*kw)."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return view.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def _im2col_direct(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Reference patch extraction: explicit loops over output positions."""
    n, c, _, _ = xp.shape
    cols = np.empty((n, oh, ow, c * kh * kw), dtype=xp.dtype)
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            cols[:, i, j, :] = patch.reshape(n, -1)
    return cols.reshape(n * oh * ow, c * kh * kw)


def _conv_geometry(node: str, x_shape, k: int, stride: int, padding: int):
    n, c, h, w = x_shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if (h + 2 * padding - k) % stride or (w + 2 * padding - k) % stride:
        raise ShapeError(node, f"stride {stride} does not tile input {h}x{w} with kernel {k}, pad {padding}")
    return n, c, h, w, oh, ow


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           method: str = "im2col") -> Tensor:
    """Dense 2-D convolution (cross-correlation), NCHW x (OC,C,kh,kw).

    ``method`` selects the patch-extraction code path ("im2col" strided view
    vs "direct" position loops); both feed the identical GEMM so outputs are
    bit-identical, which the test suite asserts.
    """
    oc, wc, kh, kw = w.shape
    n, c, h, _w, oh, ow = _conv_geometry("conv2d", x.shape, kh, stride, padding)
    if wc != c:
        raise ShapeError("conv2d", f"input has {c} channels, weight expects {wc}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    builder = _im2col_strided if method == "im2col" else _im2col_direct
    cols = np.ascontiguousarray(builder(xp, kh, kw, stride, oh, ow))
    w_mat = w.data.reshape(oc, -1).T
    out_mat = cols @ w_mat
    data = out_mat.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)

    def bwd(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, oc)
        if w._needs:
            _accum(w, (g_mat.T @ cols).reshape(w.shape))
        if x._needs:
            dcols = (g_mat @ w_mat.T).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    dxp[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride] += dcols[:, :, a, b]
            _accum(x, dxp[:, :, padding:padding + h, padding:padding + _w] if padding else dxp)

    return _make(data, "conv2d", (x, w), bwd)


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel 2-D convolution, NCHW x (C,kh,kw)."""
    wc, kh, kw = w.shape
    n, c, h, _w, oh, ow = _conv_geometry("depthwise_conv2d", x.shape, kh, stride, padding)
    if wc != c:
        raise ShapeError("depthwise_conv2d", f"input has {c} channels, weight expects {wc}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    data = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            data += xp[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride] * w.data[:, a, b][None, :, None, None]

    def bwd(g):
        if w._needs:
            dw = np.empty_like(w.data)
            for a in range(kh):
                for b in range(kw):
                    sl = xp[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride]
                    dw[:, a, b] = np.einsum("nchw,nchw->c", g, sl)
            _accum(w, dw)
        if x._needs:
            dxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    dxp[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride] += g * w.data[:, a, b][None, :, None, None]
            _accum(x, dxp[:, :, padding:padding + h, padding:padding + _w] if padding else dxp)

    return _make(data, "depthwise_conv2d", (x, w), bwd)


# -- graph execution -----------------------------------------------------------

def _topo(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Accumulate gradients of a scalar loss into every reachable leaf.

    Returns a name->gradient dict when ``params`` is given; parameters with
    no path to the loss get exact zeros.  A second call on the same loss
    tensor (without rebuilding the graph) is an error.
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if loss._backward_ran:
        raise GraphError("backward already ran for this graph; run a new forward first")
    loss._backward_ran = True
    order = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if not node.requires_grad:
            node.grad = None
        node._parents = ()
        node._backward = None
    if params is None:
        return {}
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def graph_ops(loss: Tensor) -> set[str]:
    """The set of op names reachable from ``loss`` (pre-backward only)."""
    return {node.op for node in _topo(loss) if node.op is not None}


# -- gradient checking ----------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    per_param: dict[str, float] = field(default_factory=dict)
    flagged_ops: list[str] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    def flagged(self) -> bool:
        return bool(self.flagged_ops)


ESTIMATOR_OPS = {"hard_gate": "estimator, excluded from exactness check"}


def gradient_check(build_loss: Callable[[dict[str, Tensor]], Tensor],
                   params: dict[str, Tensor],
                   fd_step: float = 1e-4,
                   max_elements_per_param: int | None = None,
                   rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backward() against 64-bit central finite differences.

    ``build_loss`` must be a pure function of the parameter dict; it is
    re-invoked with float64 shadows of ``params`` (any noise must already be
    frozen inside the closure).  Ops with estimator semantics (the hard STE
    gate) are reported in ``flagged_ops`` and excluded from the exactness
    claim.
    """
    shadows = {k: Tensor(v.data.astype(np.float64), requires_grad=True, name=k)
               for k, v in params.items()}
    loss = build_loss(shadows)
    ops = graph_ops(loss)
    report = GradCheckReport(flagged_ops=[f"{op}: {note}" for op, note in ESTIMATOR_OPS.items() if op in ops])
    analytic = backward(loss, shadows)

    def eval_loss() -> float:
        with no_grad():
            return build_loss(shadows).item()

    for name, p in shadows.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_elements_per_param is not None and n > max_elements_per_param:
            gen = rng or np.random.default_rng(0)
            idxs = gen.choice(n, size=max_elements_per_param, replace=False)
        else:
            idxs = range(n)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + fd_step
            f_plus = eval_loss()
            flat[i] = orig - fd_step
            f_minus = eval_loss()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * fd_step)
            a = float(a_flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
        report.per_param[name] = worst
    return report
