"""Reverse-mode differentiable tensor built on numpy float64 arrays.

Every operation goes through :func:`apply_primitive`, which validates the
inputs, runs the forward rule of one :class:`PrimitiveKind` and records the
parents so :func:`backward` can replay the vector-Jacobian products.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit

from dlif.tensor import kernels

STD_EPS = 1e-6
NORM_FLOOR = 1e-12


class TensorError(Exception):
    """Base class for engine errors."""


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, ArithmeticError):
    pass


class NonScalarLossError(TensorError, ValueError):
    pass


class MissingProvenanceError(TensorError, RuntimeError):
    pass


class PrimitiveKind(str, enum.Enum):
    CONV2D = "conv2d"
    LINEAR = "linear"
    RELU = "relu"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"
    L2_NORMALIZE = "l2_normalize"
    CHANNEL_MEAN = "channel_mean"
    CHANNEL_STD = "channel_std"
    GLOBAL_AVG_POOL = "global_avg_pool"
    CONCAT = "concat"
    ADD = "add"
    MUL = "mul"
    SCALE = "scale"
    MATMUL = "matmul"
    TRANSPOSE = "transpose"
    SUM = "sum"
    MEAN = "mean"
    SQUARE = "square"
    LOG = "log"
    EXP = "exp"
    SLICE = "slice"
    BROADCAST_CHANNEL = "broadcast_channel"


@dataclass
class _Record:
    kind: PrimitiveKind
    parents: tuple
    attrs: dict
    ctx: Any = None


class Tensor:
    """N-dimensional float64 array node.

    Leaves created by the user carry ``requires_grad``; results of primitives
    inherit it from their inputs and keep an ``op_record`` for backprop.
    """

    __slots__ = ("data", "requires_grad", "grad", "op_record", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op_record: _Record | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.op_record is None

    def detach(self) -> "Tensor":
        """Value-sharing tensor cut from the graph; receives no gradient."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar maps onto primitives; no implicit broadcasting
    def __add__(self, other):
        return apply_primitive(PrimitiveKind.ADD, [self, _as_tensor(other, self)])

    __radd__ = __add__

    def __neg__(self):
        return apply_primitive(PrimitiveKind.SCALE, [self], {"factor": -1.0})

    def __sub__(self, other):
        return self + (-_as_tensor(other, self))

    def __rsub__(self, other):
        return _as_tensor(other, self) + (-self)

    def __mul__(self, other):
        if np.isscalar(other):
            return apply_primitive(PrimitiveKind.SCALE, [self], {"factor": float(other)})
        return apply_primitive(PrimitiveKind.MUL, [self, _as_tensor(other, self)])

    __rmul__ = __mul__

    def __matmul__(self, other):
        return apply_primitive(PrimitiveKind.MATMUL, [self, other])

    def __getitem__(self, index):
        return apply_primitive(PrimitiveKind.SLICE, [self], {"index": index})


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if np.isscalar(value):
        return Tensor(np.full(like.shape, float(value)))
    return Tensor(value)


# ---------------------------------------------------------------------------
# forward / backward rules
# each forward returns (out, ctx); each backward returns one grad per input


def _shape_error(kind: PrimitiveKind, msg: str) -> ShapeError:
    return ShapeError(f"{kind.value}: {msg}")


def _conv2d_fwd(xs, attrs):
    x, w = xs[0], xs[1]
    kind = PrimitiveKind.CONV2D
    if x.ndim != 4 or w.ndim != 4:
        raise _shape_error(kind, f"expected NCHW input and OIHW kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise _shape_error(kind, f"input channels {x.shape[1]} != kernel in-channels {w.shape[1]}")
    if len(xs) == 3 and xs[2].shape != (w.shape[0],):
        raise _shape_error(kind, f"bias shape {xs[2].shape} != ({w.shape[0]},)")
    stride = int(attrs.get("stride", 1))
    pad = int(attrs.get("padding", 0))
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    n, _, h, wd = xp.shape
    if h < kh or wd < kw:
        raise _shape_error(kind, f"padded input {h}x{wd} smaller than kernel {kh}x{kw}")
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    cols = kernels.im2col(xp, kh, kw, stride)
    wmat = w.reshape(w.shape[0], -1)
    out = cols @ wmat.T
    if len(xs) == 3:
        out += xs[2]
    out = out.reshape(n, oh, ow, w.shape[0]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, xp.shape)


def _conv2d_bwd(g, xs, out, ctx, attrs):
    x, w = xs[0], xs[1]
    cols, padded_shape = ctx
    stride = int(attrs.get("stride", 1))
    pad = int(attrs.get("padding", 0))
    kh, kw = w.shape[2], w.shape[3]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
    dw = (g2.T @ cols).reshape(w.shape)
    dcols = g2 @ w.reshape(w.shape[0], -1)
    dxp = kernels.col2im(dcols, padded_shape, kh, kw, stride)
    dx = dxp[:, :, pad:pad + x.shape[2], pad:pad + x.shape[3]] if pad else dxp
    grads = [np.ascontiguousarray(dx), dw]
    if len(xs) == 3:
        grads.append(g2.sum(axis=0))
    return grads


def _linear_fwd(xs, attrs):
    x, w = xs[0], xs[1]
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise _shape_error(PrimitiveKind.LINEAR, f"input {x.shape} incompatible with weight {w.shape}")
    if len(xs) == 3 and xs[2].shape != (w.shape[0],):
        raise _shape_error(PrimitiveKind.LINEAR, f"bias shape {xs[2].shape} != ({w.shape[0]},)")
    out = x @ w.T
    if len(xs) == 3:
        out = out + xs[2]
    return out, None


def _linear_bwd(g, xs, out, ctx, attrs):
    x, w = xs[0], xs[1]
    grads = [g @ w, g.T @ x]
    if len(xs) == 3:
        grads.append(g.sum(axis=0))
    return grads


def _relu_fwd(xs, attrs):
    return np.maximum(xs[0], 0.0), None


def _relu_bwd(g, xs, out, ctx, attrs):
    return [g * (xs[0] > 0)]


def _sigmoid_fwd(xs, attrs):
    return expit(xs[0]), None


def _sigmoid_bwd(g, xs, out, ctx, attrs):
    return [g * out * (1.0 - out)]


def _softmax_fwd(xs, attrs):
    axis = attrs.get("axis", -1)
    z = xs[0] - xs[0].max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True), None


def _softmax_bwd(g, xs, out, ctx, attrs):
    axis = attrs.get("axis", -1)
    return [out * (g - (g * out).sum(axis=axis, keepdims=True))]


def _l2n_fwd(xs, attrs):
    if "axis" not in attrs:
        raise _shape_error(PrimitiveKind.L2_NORMALIZE, "an axis must be designated")
    axis = attrs["axis"]
    norm = np.sqrt((xs[0] ** 2).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, NORM_FLOOR)
    return xs[0] / denom, (norm, denom)


def _l2n_bwd(g, xs, out, ctx, attrs):
    norm, denom = ctx
    axis = attrs["axis"]
    live = norm > NORM_FLOOR
    proj = (g * out).sum(axis=axis, keepdims=True)
    return [np.where(live, (g - out * proj) / denom, g / denom)]


def _check_nchw(kind, x):
    if x.ndim != 4:
        raise _shape_error(kind, f"expected NCHW input, got shape {x.shape}")


def _chmean_fwd(xs, attrs):
    _check_nchw(PrimitiveKind.CHANNEL_MEAN, xs[0])
    return xs[0].mean(axis=(2, 3)), None


def _chmean_bwd(g, xs, out, ctx, attrs):
    _, _, h, w = xs[0].shape
    return [np.broadcast_to((g / (h * w))[:, :, None, None], xs[0].shape).copy()]


def _gap_fwd(xs, attrs):
    _check_nchw(PrimitiveKind.GLOBAL_AVG_POOL, xs[0])
    return xs[0].mean(axis=(2, 3)), None


def _chstd_fwd(xs, attrs):
    x = xs[0]
    _check_nchw(PrimitiveKind.CHANNEL_STD, x)
    centered = x - x.mean(axis=(2, 3), keepdims=True)
    std = np.sqrt((centered ** 2).mean(axis=(2, 3)) + STD_EPS)
    return std, centered


def _chstd_bwd(g, xs, out, ctx, attrs):
    centered = ctx
    _, _, h, w = centered.shape
    return [(g / (h * w * out))[:, :, None, None] * centered]


def _concat_fwd(xs, attrs):
    axis = attrs.get("axis", 0)
    ref = xs[0]
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
            a != b for d, (a, b) in enumerate(zip(x.shape, ref.shape)) if d != axis % ref.ndim
        ):
            raise _shape_error(PrimitiveKind.CONCAT, f"shapes {ref.shape} and {x.shape} differ off axis {axis}")
    return np.concatenate(xs, axis=axis), [x.shape[axis] for x in xs]


def _concat_bwd(g, xs, out, ctx, attrs):
    axis = attrs.get("axis", 0)
    cuts = np.cumsum(ctx)[:-1]
    return np.split(g, cuts, axis=axis)


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise _shape_error(kind, f"operand shapes {a.shape} and {b.shape} differ")


def _add_fwd(xs, attrs):
    _same_shape(PrimitiveKind.ADD, xs[0], xs[1])
    return xs[0] + xs[1], None


def _add_bwd(g, xs, out, ctx, attrs):
    return [g, g]


def _mul_fwd(xs, attrs):
    _same_shape(PrimitiveKind.MUL, xs[0], xs[1])
    return xs[0] * xs[1], None


def _mul_bwd(g, xs, out, ctx, attrs):
    return [g * xs[1], g * xs[0]]


def _scale_fwd(xs, attrs):
    return xs[0] * float(attrs["factor"]), None


def _scale_bwd(g, xs, out, ctx, attrs):
    return [g * float(attrs["factor"])]


def _matmul_fwd(xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error(PrimitiveKind.MATMUL, f"cannot multiply {a.shape} by {b.shape}")
    return a @ b, None


def _matmul_bwd(g, xs, out, ctx, attrs):
    a, b = xs
    return [g @ b.T, a.T @ g]


def _transpose_fwd(xs, attrs):
    axes = attrs.get("axes")
    return np.ascontiguousarray(np.transpose(xs[0], axes)), None


def _transpose_bwd(g, xs, out, ctx, attrs):
    axes = attrs.get("axes")
    inv = None if axes is None else np.argsort(axes)
    return [np.ascontiguousarray(np.transpose(g, inv))]


def _reduce_grad(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape(()), shape).copy() if g.size == 1 else g
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def _sum_fwd(xs, attrs):
    return np.asarray(xs[0].sum(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))), None


def _sum_bwd(g, xs, out, ctx, attrs):
    return [_reduce_grad(g, xs[0].shape, attrs.get("axis"), attrs.get("keepdims", False))]


def _mean_fwd(xs, attrs):
    return np.asarray(xs[0].mean(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))), None


def _mean_bwd(g, xs, out, ctx, attrs):
    axis = attrs.get("axis")
    x = xs[0]
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return [_reduce_grad(g, x.shape, axis, attrs.get("keepdims", False)) / count]


def _square_fwd(xs, attrs):
    return xs[0] * xs[0], None


def _square_bwd(g, xs, out, ctx, attrs):
    return [2.0 * xs[0] * g]


def _log_fwd(xs, attrs):
    if np.any(xs[0] <= 0):
        raise NonFiniteError("log: input contains non-positive values")
    return np.log(xs[0]), None


def _log_bwd(g, xs, out, ctx, attrs):
    return [g / xs[0]]


def _exp_fwd(xs, attrs):
    return np.exp(xs[0]), None


def _exp_bwd(g, xs, out, ctx, attrs):
    return [g * out]


def _slice_fwd(xs, attrs):
    return np.ascontiguousarray(xs[0][attrs["index"]]), None


def _slice_bwd(g, xs, out, ctx, attrs):
    dx = np.zeros_like(xs[0])
    np.add.at(dx, attrs["index"], g)
    return [dx]


def _bcast_fwd(xs, attrs):
    v = xs[0]
    h, w = attrs["spatial"]
    if v.ndim != 2:
        raise _shape_error(PrimitiveKind.BROADCAST_CHANNEL, f"expected (N, C) vector, got {v.shape}")
    return np.ascontiguousarray(np.broadcast_to(v[:, :, None, None], v.shape + (h, w))), None


def _bcast_bwd(g, xs, out, ctx, attrs):
    return [g.sum(axis=(2, 3))]


_RULES: dict[PrimitiveKind, tuple[Callable, Callable]] = {
    PrimitiveKind.CONV2D: (_conv2d_fwd, _conv2d_bwd),
    PrimitiveKind.LINEAR: (_linear_fwd, _linear_bwd),
    PrimitiveKind.RELU: (_relu_fwd, _relu_bwd),
    PrimitiveKind.SIGMOID: (_sigmoid_fwd, _sigmoid_bwd),
    PrimitiveKind.SOFTMAX: (_softmax_fwd, _softmax_bwd),
    PrimitiveKind.L2_NORMALIZE: (_l2n_fwd, _l2n_bwd),
    PrimitiveKind.CHANNEL_MEAN: (_chmean_fwd, _chmean_bwd),
    PrimitiveKind.CHANNEL_STD: (_chstd_fwd, _chstd_bwd),
    PrimitiveKind.GLOBAL_AVG_POOL: (_gap_fwd, _chmean_bwd),
    PrimitiveKind.CONCAT: (_concat_fwd, _concat_bwd),
    PrimitiveKind.ADD: (_add_fwd, _add_bwd),
    PrimitiveKind.MUL: (_mul_fwd, _mul_bwd),
    PrimitiveKind.SCALE: (_scale_fwd, _scale_bwd),
    PrimitiveKind.MATMUL: (_matmul_fwd, _matmul_bwd),
    PrimitiveKind.TRANSPOSE: (_transpose_fwd, _transpose_bwd),
    PrimitiveKind.SUM: (_sum_fwd, _sum_bwd),
    PrimitiveKind.MEAN: (_mean_fwd, _mean_bwd),
    PrimitiveKind.SQUARE: (_square_fwd, _square_bwd),
    PrimitiveKind.LOG: (_log_fwd, _log_bwd),
    PrimitiveKind.EXP: (_exp_fwd, _exp_bwd),
    PrimitiveKind.SLICE: (_slice_fwd, _slice_bwd),
    PrimitiveKind.BROADCAST_CHANNEL: (_bcast_fwd, _bcast_bwd),
}


def apply_primitive(kind: PrimitiveKind | str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Run one primitive forward and record it for backpropagation."""
    kind = PrimitiveKind(kind)
    attrs = dict(attrs or {})
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{kind.value}: inputs must be Tensor, got {type(t).__name__}")
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{kind.value}: input contains NaN or Inf")
    fwd, _ = _RULES[kind]
    datas = [t.data for t in inputs]
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        try:
            out, ctx = fwd(datas, attrs)
        except FloatingPointError as exc:
            raise NonFiniteError(f"{kind.value}: {exc}") from exc
    result = Tensor(out)
    result.requires_grad = any(t.requires_grad for t in inputs)
    result.op_record = _Record(kind, tuple(inputs), attrs, ctx if result.requires_grad else None)
    return result


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.op_record is not None:
            for parent in node.op_record.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise NonScalarLossError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.op_record is None and not loss.requires_grad:
        raise MissingProvenanceError("loss was created outside the computation record")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        rec = node.op_record
        if rec is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        _, bwd = _RULES[rec.kind]
        in_grads = bwd(g, [p.data for p in rec.parents], node.data, rec.ctx, rec.attrs)
        for parent, pg in zip(rec.parents, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


@dataclass
class Parameters:
    """Ordered name -> Tensor mapping for one network."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}
