"""Thin functional wrappers over :func:`apply_primitive`."""
from __future__ import annotations

from typing import Sequence

from dlif.tensor.core import PrimitiveKind as K
from dlif.tensor.core import Tensor, apply_primitive


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    inputs = [x, w] if b is None else [x, w, b]
    return apply_primitive(K.CONV2D, inputs, {"stride": stride, "padding": padding})


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return apply_primitive(K.LINEAR, [x, w] if b is None else [x, w, b])


def relu(x: Tensor) -> Tensor:
    return apply_primitive(K.RELU, [x])


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive(K.SIGMOID, [x])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive(K.SOFTMAX, [x], {"axis": axis})


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive(K.L2_NORMALIZE, [x], {"axis": axis})


def channel_mean(x: Tensor) -> Tensor:
    return apply_primitive(K.CHANNEL_MEAN, [x])


def channel_std(x: Tensor) -> Tensor:
    return apply_primitive(K.CHANNEL_STD, [x])


def global_avg_pool(x: Tensor) -> Tensor:
    return apply_primitive(K.GLOBAL_AVG_POOL, [x])


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive(K.CONCAT, list(xs), {"axis": axis})


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive(K.ADD, [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive(K.MUL, [a, b])


def scale(x: Tensor, factor: float) -> Tensor:
    return apply_primitive(K.SCALE, [x], {"factor": factor})


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive(K.MATMUL, [a, b])


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return apply_primitive(K.TRANSPOSE, [x], {"axes": None if axes is None else tuple(axes)})


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return apply_primitive(K.SUM, [x], {"axis": axis, "keepdims": keepdims})


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive(K.MEAN, [x], {"axis": axis, "keepdims": keepdims})


def square(x: Tensor) -> Tensor:
    return apply_primitive(K.SQUARE, [x])


def log(x: Tensor) -> Tensor:
    return apply_primitive(K.LOG, [x])


def exp(x: Tensor) -> Tensor:
    return apply_primitive(K.EXP, [x])


def take(x: Tensor, index) -> Tensor:
    """Index ``x`` with any numpy index (slices, integer arrays, tuples)."""
    return apply_primitive(K.SLICE, [x], {"index": index})


def broadcast_channel(v: Tensor, spatial: tuple[int, int]) -> Tensor:
    """Expand per-channel values (N, C) over spatial dims to (N, C, H, W)."""
    return apply_primitive(K.BROADCAST_CHANNEL, [v], {"spatial": tuple(spatial)})


def reciprocal(x: Tensor) -> Tensor:
    """1/x for strictly positive x, composed as exp(-log x)."""
    return exp(scale(log(x), -1.0))
