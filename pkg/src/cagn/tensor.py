"""Dense tensors with reverse-mode automatic differentiation on a tape.

The engine is numpy-backed and CPU-only.  Every primitive's vjp is written
in terms of other primitives, so gradients are themselves differentiable;
the discriminator gradient penalty relies on that (gradient-of-gradient
w.r.t. the discriminator weights).

Convolution is the adjoint trio (forward / input-grad / weight-grad), each
implemented with im2col + batched matmul and each expressing its vjps via
the other two.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolationError, NumericFailureError

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "backward",
    "grad",
    "tensor",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "smul",
    "sadd",
    "cmul",
    "sum_all",
    "mean_all",
    "sum_axes",
    "reshape",
    "transpose2d",
    "matmul",
    "dense",
    "conv2d",
    "add_channel_bias",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "softplus",
    "log",
    "exp",
    "square",
    "upsample_nearest2x",
    "avg_pool2x",
    "concat_channels",
    "slice_channels",
    "gather_channels",
    "index_rows",
    "broadcast_plane",
    "elementwise",
]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager suppressing tape recording."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tape:
    """Ordered record of the ops created while the tape was active.

    Entries are (node_id, op_name, parent_node_ids).  Node ids are
    monotonically increasing, so the recording order is a topological
    order of the graph by construction.
    """

    def __init__(self):
        self.entries: list[tuple[int, str, tuple[int, ...]]] = []

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def __len__(self):
        return len(self.entries)


_next_id = [0]
_id_lock = threading.Lock()


def _new_id() -> int:
    with _id_lock:
        _next_id[0] += 1
        return _next_id[0]


class Tensor:
    """A dense n-d array, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "node_id", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = _new_id()
        self.grad: Optional[Tensor] = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable] = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op})"

    # operator sugar used throughout the model code
    def __add__(self, other):
        return sadd(self, other) if isinstance(other, (int, float)) else add(self, other)

    def __sub__(self, other):
        return sadd(self, -other) if isinstance(other, (int, float)) else sub(self, other)

    def __mul__(self, other):
        return smul(self, other) if isinstance(other, (int, float)) else mul(self, other)

    def __rmul__(self, other):
        return smul(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _from_op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.node_id = _new_id()
    out.grad = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
        tape = getattr(_state, "tape", None)
        if tape is not None:
            tape.entries.append((out.node_id, op, tuple(p.node_id for p in parents)))
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        out._op = op
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ContractViolationError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Optional[Tape] = None, create_graph: bool = False) -> dict[int, Tensor]:
    """Reverse-mode pass from a scalar loss.

    Returns {node_id: gradient Tensor} for every requires_grad leaf that the
    loss actually depends on, and sets `.grad` on those leaves.  Frozen
    leaves (requires_grad=False) never appear in the map.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractViolationError("backward: loss must be a scalar")
    grads = grad([loss], None, create_graph=create_graph)
    return grads


def grad(
    outputs: Sequence[Tensor],
    inputs: Optional[Sequence[Tensor]],
    create_graph: bool = False,
) -> dict[int, Tensor]:
    """Gradients of sum(outputs) w.r.t. every reachable requires_grad leaf
    (inputs=None) or the given inputs.  With create_graph=True the returned
    gradients are connected to the tape and can be differentiated again."""
    # collect reachable subgraph
    visited: dict[int, Tensor] = {}
    stack = [t for t in outputs if t.requires_grad]
    while stack:
        t = stack.pop()
        if t.node_id in visited:
            continue
        visited[t.node_id] = t
        stack.extend(t._parents)

    order = sorted(visited.values(), key=lambda t: t.node_id, reverse=True)
    cot: dict[int, Tensor] = {}
    for out in outputs:
        if out.node_id in visited:
            seed = Tensor(np.ones_like(out.data))
            cot[out.node_id] = add(cot[out.node_id], seed) if out.node_id in cot else seed

    def run():
        leaf_grads: dict[int, Tensor] = {}
        for node in order:
            g = cot.pop(node.node_id, None)
            if g is None:
                continue
            if node._vjp is None:
                leaf_grads[node.node_id] = g
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if not create_graph and not np.all(np.isfinite(pg.data)):
                    raise NumericFailureError(
                        f"non-finite gradient produced by op '{node._op}'",
                        op_id=node.node_id,
                    )
                cot[p.node_id] = add(cot[p.node_id], pg) if p.node_id in cot else pg
        return leaf_grads

    if create_graph:
        leaf_grads = run()
    else:
        with no_grad():
            leaf_grads = run()

    if inputs is None:
        for node in visited.values():
            if node._vjp is None and node.node_id in leaf_grads:
                node.grad = leaf_grads[node.node_id]
        return leaf_grads
    result: dict[int, Tensor] = {}
    for t in inputs:
        if t.node_id in leaf_grads:
            result[t.node_id] = leaf_grads[t.node_id]
            t.grad = leaf_grads[t.node_id]
    return result


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return _from_op(-a.data, (a,), lambda g: (neg(g),), "neg")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _from_op(a.data - b.data, (a, b), lambda g: (g, neg(g)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _from_op(a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")

    def vjp(g):
        inv = div(_ones_like(b), b)
        da = mul(g, inv)
        db = neg(mul(mul(g, a), mul(inv, inv)))
        return da, db

    return _from_op(a.data / b.data, (a, b), vjp, "div")


def smul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _from_op(a.data * np.asarray(s, dtype=a.dtype), (a,), lambda g: (smul(g, s),), "smul")


def sadd(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _from_op(a.data + np.asarray(s, dtype=a.dtype), (a,), lambda g: (g,), "sadd")


def cmul(a: Tensor, const: np.ndarray) -> Tensor:
    """Multiply by a constant array (not differentiated through)."""
    const = np.asarray(const, dtype=a.dtype)
    return _from_op(a.data * const, (a,), lambda g: (cmul(g, const),), "cmul")


def _ones_like(a: Tensor) -> Tensor:
    return Tensor(np.ones_like(a.data))


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape

    def vjp(g):
        return (_broadcast_from_scalar(g, shape),)

    return _from_op(np.asarray(a.data.sum(), dtype=a.dtype), (a,), vjp, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    return smul(sum_all(a), 1.0 / a.data.size)


def _broadcast_from_scalar(g: Tensor, shape) -> Tensor:
    def vjp(h):
        return (sum_all(h),)

    return _from_op(np.broadcast_to(g.data, shape).copy(), (g,), vjp, "bcast_scalar")


def sum_axes(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(sorted(ax % a.data.ndim for ax in axes))
    shape = a.data.shape

    def vjp(g):
        return (_broadcast_axes(g, shape, axes),)

    return _from_op(a.data.sum(axis=axes), (a,), vjp, "sum_axes")


def _broadcast_axes(g: Tensor, shape, axes) -> Tensor:
    expanded = g.data
    for ax in axes:
        expanded = np.expand_dims(expanded, ax)
    out = np.broadcast_to(expanded, shape).copy()

    def vjp(h):
        return (sum_axes(h, axes),)

    return _from_op(out, (g,), vjp, "bcast_axes")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    if int(np.prod(shape)) != a.data.size:
        raise ContractViolationError(f"reshape: size mismatch {old} -> {shape}")
    return _from_op(
        np.ascontiguousarray(a.data).reshape(shape), (a,), lambda g: (reshape(g, old),), "reshape"
    )


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ContractViolationError("transpose2d: expects a matrix")
    return _from_op(np.ascontiguousarray(a.data.T), (a,), lambda g: (transpose2d(g),), "transpose2d")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ContractViolationError(f"matmul: shapes {a.data.shape} @ {b.data.shape}")

    def vjp(g):
        return matmul(g, transpose2d(b)), matmul(transpose2d(a), g)

    return _from_op(a.data @ b.data, (a, b), vjp, "matmul")


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map: x[B,F_in] @ weight[F_out,F_in]^T + bias[F_out]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ContractViolationError(
            f"dense: input {x.data.shape} incompatible with weight {weight.data.shape}"
        )
    out = matmul(x, transpose2d(weight))
    if bias is not None:
        if bias.data.shape != (weight.data.shape[0],):
            raise ContractViolationError("dense: bias shape mismatch")
        out = _add_rowvec(out, bias)
    return out


def _add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return g, sum_axes(g, (0,))

    return _from_op(x.data + b.data[None, :], (x, b), vjp, "add_rowvec")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 4 or b.data.shape != (x.data.shape[1],):
        raise ContractViolationError("add_channel_bias: shape mismatch")

    def vjp(g):
        return g, sum_axes(g, (0, 2, 3))

    return _from_op(x.data + b.data[None, :, None, None], (x, b), vjp, "add_channel_bias")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    if not (0.0 < alpha < 1.0):
        raise ContractViolationError("leaky_relu: alpha must be in (0,1)")
    mask = np.where(x.data >= 0, np.asarray(1.0, x.dtype), np.asarray(alpha, x.dtype))
    return _from_op(x.data * mask, (x,), lambda g: (cmul(g, mask),), "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    ydata = np.tanh(x.data)
    out = _from_op(ydata, (x,), None, "tanh")

    def vjp(g):
        return (mul(g, sadd(neg(mul(out, out)), 1.0)),)

    out._vjp = vjp if out.requires_grad else None
    return out


def sigmoid(x: Tensor) -> Tensor:
    ydata = 1.0 / (1.0 + np.exp(-x.data))
    out = _from_op(ydata, (x,), None, "sigmoid")

    def vjp(g):
        return (mul(g, mul(out, sadd(neg(out), 1.0))),)

    out._vjp = vjp if out.requires_grad else None
    return out


def softplus(x: Tensor) -> Tensor:
    # stable: log(1+e^x) = max(x,0) + log1p(e^{-|x|})
    ydata = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))

    def vjp(g):
        return (mul(g, sigmoid(x)),)

    return _from_op(ydata.astype(x.dtype), (x,), vjp, "softplus")


def log(x: Tensor) -> Tensor:
    def vjp(g):
        return (div(g, x),)

    return _from_op(np.log(x.data), (x,), vjp, "log")


def exp(x: Tensor) -> Tensor:
    out = _from_op(np.exp(x.data), (x,), None, "exp")

    def vjp(g):
        return (mul(g, out),)

    out._vjp = vjp if out.requires_grad else None
    return out


def square(x: Tensor) -> Tensor:
    return mul(x, x)


# ---------------------------------------------------------------------------
# resampling / concat
# ---------------------------------------------------------------------------

def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ContractViolationError("upsample_nearest2x: expects [B,C,H,W]")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (smul(avg_pool2x(g), 4.0),)

    return _from_op(out, (x,), vjp, "upsample_nearest2x")


def avg_pool2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.data.shape[2] % 2 or x.data.shape[3] % 2:
        raise ContractViolationError("avg_pool2x: H and W must be even")
    b, c, h, w = x.data.shape
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        return (smul(upsample_nearest2x(g), 0.25),)

    return _from_op(out, (x,), vjp, "avg_pool2x")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractViolationError("concat_channels: empty input")
    base = parts[0].data.shape
    for p in parts:
        if p.data.ndim != base.__len__() or p.data.shape[0] != base[0] or p.data.shape[2:] != base[2:]:
            raise ContractViolationError("concat_channels: nonconforming shapes")
    bounds = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def vjp(g):
        return tuple(slice_channels(g, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _from_op(np.concatenate([p.data for p in parts], axis=1), parts, vjp, "concat_channels")


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    c = x.data.shape[1]
    if not (0 <= lo < hi <= c):
        raise ContractViolationError("slice_channels: bad bounds")

    def vjp(g):
        return (_pad_channels(g, lo, c),)

    return _from_op(np.ascontiguousarray(x.data[:, lo:hi]), (x,), vjp, "slice_channels")


def _pad_channels(g: Tensor, lo: int, total: int) -> Tensor:
    shape = list(g.data.shape)
    hi = lo + shape[1]
    shape[1] = total
    out = np.zeros(shape, dtype=g.dtype)
    out[:, lo:hi] = g.data

    def vjp(h):
        return (slice_channels(h, lo, hi),)

    return _from_op(out, (g,), vjp, "pad_channels")


def gather_channels(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[:, i] = x[:, idx[i]]; used by the residual-bias channel bridge."""
    idx = np.asarray(idx, dtype=np.int64)
    c = x.data.shape[1]
    if idx.min() < 0 or idx.max() >= c:
        raise ContractViolationError("gather_channels: index out of range")

    def vjp(g):
        return (_scatter_channels(g, idx, c),)

    return _from_op(np.ascontiguousarray(x.data[:, idx]), (x,), vjp, "gather_channels")


def _scatter_channels(g: Tensor, idx: np.ndarray, c: int) -> Tensor:
    shape = list(g.data.shape)
    shape[1] = c
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, (slice(None), idx), g.data)

    def vjp(h):
        return (gather_channels(h, idx),)

    return _from_op(out, (g,), vjp, "scatter_channels")


def index_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Embedding lookup: out[i] = table[idx[i]]."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractViolationError("index_rows: index out of range")

    def vjp(g):
        return (_scatter_rows(g, idx, n),)

    return _from_op(np.ascontiguousarray(table.data[idx]), (table,), vjp, "index_rows")


def _scatter_rows(g: Tensor, idx: np.ndarray, n: int) -> Tensor:
    out = np.zeros((n,) + g.data.shape[1:], dtype=g.dtype)
    np.add.at(out, idx, g.data)

    def vjp(h):
        return (index_rows(h, idx),)

    return _from_op(out, (g,), vjp, "scatter_rows")


def broadcast_plane(v: Tensor, h: int, w: int) -> Tensor:
    """[B,E] -> [B,E,h,w] constant planes (label conditioning for images)."""
    if v.data.ndim != 2:
        raise ContractViolationError("broadcast_plane: expects [B,E]")
    out = np.broadcast_to(v.data[:, :, None, None], v.data.shape + (h, w)).copy()

    def vjp(g):
        return (sum_axes(g, (2, 3)),)

    return _from_op(out, (v,), vjp, "broadcast_plane")


# ---------------------------------------------------------------------------
# convolution: adjoint trio
# ---------------------------------------------------------------------------

def _conv_checks(x_shape, w_shape, stride, padding, groups):
    b, c_in, h, w = x_shape
    c_out, c_in_g, kh, kw = w_shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractViolationError("conv2d: kernel dims must be odd")
    if padding < 0 or stride < 1:
        raise ContractViolationError("conv2d: padding >= 0, stride >= 1")
    if c_in % groups or c_out % groups:
        raise ConfigurationError(
            f"conv2d: groups={groups} must divide C_in={c_in} and C_out={c_out}"
        )
    if c_in_g != c_in // groups:
        raise ContractViolationError(
            f"conv2d: weight expects {c_in_g} channels/group, input supplies {c_in // groups}"
        )
    oh, rem_h = divmod(h + 2 * padding - kh, stride)
    ow, rem_w = divmod(w + 2 * padding - kw, stride)
    if rem_h or rem_w or oh < 0 or ow < 0:
        raise ContractViolationError(
            f"conv2d: spatial size {(h, w)} incompatible with k={(kh, kw)}, "
            f"stride={stride}, padding={padding}"
        )
    return oh + 1, ow + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """[B,C,H,W] -> [B, C*kh*kw, OH*OW] patch matrix."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [B,C,OH,OW,kh,kw]
    b, c, oh, ow = windows.shape[:4]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def _conv_forward_raw(x, w, stride, padding, groups, oh, ow):
    b = x.shape[0]
    c_out, c_in_g, kh, kw = w.shape
    cols = _im2col(x, kh, kw, stride, padding)  # [B, C_in*kk, P]
    cols = cols.reshape(b, groups, c_in_g * kh * kw, oh * ow)
    wm = w.reshape(groups, c_out // groups, c_in_g * kh * kw)
    out = np.matmul(wm[None], cols)  # [B,G,C_out/G,P]
    return out.reshape(b, c_out, oh, ow)


def _flip_transpose_weight(w: np.ndarray, groups: int) -> np.ndarray:
    """[C_out, C_in/G, kh, kw] -> [C_in, C_out/G, kh, kw], spatially flipped."""
    c_out, c_in_g, kh, kw = w.shape
    wt = w.reshape(groups, c_out // groups, c_in_g, kh, kw)
    wt = wt.transpose(0, 2, 1, 3, 4)[:, :, :, ::-1, ::-1]
    return np.ascontiguousarray(wt.reshape(groups * c_in_g, c_out // groups, kh, kw))


def _dilate(g: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return g
    b, c, oh, ow = g.shape
    z = np.zeros((b, c, (oh - 1) * stride + 1, (ow - 1) * stride + 1), dtype=g.dtype)
    z[:, :, ::stride, ::stride] = g
    return z


def _conv_input_grad_raw(g, w, stride, padding, groups, in_hw):
    c_out, c_in_g, kh, kw = w.shape
    if padding > kh - 1 or padding > kw - 1:
        raise ContractViolationError("conv2d backward: padding must be < kernel size")
    z = _dilate(g, stride)
    wt = _flip_transpose_weight(w, groups)
    dx = _conv_forward_raw(
        z, wt, 1, kh - 1 - padding, groups, in_hw[0], in_hw[1]
    )
    return dx


def _conv_weight_grad_raw(x, g, stride, padding, groups, w_shape):
    c_out, c_in_g, kh, kw = w_shape
    b = x.shape[0]
    oh, ow = g.shape[2], g.shape[3]
    cols = _im2col(x, kh, kw, stride, padding).reshape(b, groups, c_in_g * kh * kw, oh * ow)
    gm = g.reshape(b, groups, c_out // groups, oh * ow)
    dw = np.matmul(gm, cols.transpose(0, 1, 3, 2)).sum(axis=0)  # [G, C_out/G, K]
    return dw.reshape(c_out, c_in_g, kh, kw)


def _conv_raw_op(x: Tensor, w: Tensor, stride: int, padding: int, groups: int) -> Tensor:
    oh, ow = _conv_checks(x.data.shape, w.data.shape, stride, padding, groups)
    in_hw = x.data.shape[2:]
    w_shape = w.data.shape

    def vjp(g):
        dx = _conv_input_grad_op(g, w, stride, padding, groups, in_hw)
        dw = _conv_weight_grad_op(x, g, stride, padding, groups, w_shape)
        return dx, dw

    data = _conv_forward_raw(x.data, w.data, stride, padding, groups, oh, ow)
    return _from_op(data, (x, w), vjp, "conv2d")


def _conv_input_grad_op(g: Tensor, w: Tensor, stride, padding, groups, in_hw) -> Tensor:
    w_shape = w.data.shape

    def vjp(h):
        # <h, C_T(g, w)> = <g, C(h, w)>  and  d/dw -> C_W(h, g)
        dg = _conv_raw_op(h, w, stride, padding, groups)
        dw = _conv_weight_grad_op(h, g, stride, padding, groups, w_shape)
        return dg, dw

    data = _conv_input_grad_raw(g.data, w.data, stride, padding, groups, in_hw)
    return _from_op(data, (g, w), vjp, "conv2d_input_grad")


def _conv_weight_grad_op(x: Tensor, g: Tensor, stride, padding, groups, w_shape) -> Tensor:
    in_hw = x.data.shape[2:]

    def vjp(v):
        # <v, C_W(x, g)> = <g, C(x, v)>
        dx = _conv_input_grad_op(g, v, stride, padding, groups, in_hw)
        dg = _conv_raw_op(x, v, stride, padding, groups)
        return dx, dg

    data = _conv_weight_grad_raw(x.data, g.data, stride, padding, groups, w_shape)
    return _from_op(data, (x, g), vjp, "conv2d_weight_grad")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D convolution; output channel g*(C_out/G)+j reads only the
    contiguous input channel block [g*C_in/G, (g+1)*C_in/G)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ContractViolationError("conv2d: input [B,C,H,W], weight [C_out,C_in/G,kh,kw]")
    out = _conv_raw_op(x, weight, stride, padding, groups)
    if bias is not None:
        if bias.data.shape != (weight.data.shape[0],):
            raise ContractViolationError("conv2d: bias shape mismatch")
        out = add_channel_bias(out, bias)
    return out


# ---------------------------------------------------------------------------
# elementwise dispatcher (contract surface)
# ---------------------------------------------------------------------------

def elementwise(op_kind: str, *args, **kwargs) -> Tensor:
    ops = {
        "add": add,
        "scale": smul,
        "leaky_relu": leaky_relu,
        "upsample_nearest": upsample_nearest2x,
        "avg_pool": avg_pool2x,
        "reshape": reshape,
        "concat_channels": concat_channels,
    }
    if op_kind not in ops:
        raise ContractViolationError(f"elementwise: unknown op_kind '{op_kind}'")
    return ops[op_kind](*args, **kwargs)
