"""Encoders, cosine heads and the channel-wise style attention block.

An encoder is three stages of ``conv3x3/2 -> ReLU -> conv3x3/1 -> ReLU``
followed by global average pooling.  The stage outputs are the low, middle
and high hook points where style cross may be applied.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dlif.stylecross import LEVELS, Pairing, StylePlan, expand_flows, style_cross_permuted
from dlif.tensor import Parameters, Tensor
from dlif.tensor import dlif_io
from dlif.tensor import ops


@dataclass
class EncoderConfig:
    input_size: int = 32
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    feature_dim: int = 64
    cwsa_enabled: bool = False
    cwsa_reduction: int = 4
    in_channels: int = 3

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != 3:
            raise ValueError("stage_channels needs three entries (low, middle, high)")
        if self.input_size % 8:
            raise ValueError(f"input_size {self.input_size} is not divisible by 8")
        if self.feature_dim != self.stage_channels[2]:
            raise ValueError(f"feature_dim {self.feature_dim} must equal high-stage channels {self.stage_channels[2]}")
        if self.cwsa_enabled and self.stage_channels[2] // self.cwsa_reduction < 1:
            raise ValueError("cwsa_reduction leaves no hidden units")


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(data, name) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Encoder:
    """Three-stage CNN with optional CWSA on the high-level map."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.params = Parameters()
        c_in = config.in_channels
        for s, c_out in enumerate(config.stage_channels, start=1):
            for conv, cin in (("conv_a", c_in), ("conv_b", c_out)):
                key = f"stage{s}.{conv}"
                self.params[f"{key}.weight"] = _param(
                    _kaiming_uniform(rng, (c_out, cin, 3, 3), cin * 9), f"{key}.weight")
                self.params[f"{key}.bias"] = _param(np.zeros(c_out), f"{key}.bias")
            c_in = c_out
        if config.cwsa_enabled:
            c = config.stage_channels[2]
            hidden = c // config.cwsa_reduction
            self.params["cwsa.w1.weight"] = _param(_kaiming_uniform(rng, (hidden, 2 * c), 2 * c), "cwsa.w1.weight")
            self.params["cwsa.w1.bias"] = _param(np.zeros(hidden), "cwsa.w1.bias")
            self.params["cwsa.w2.weight"] = _param(_kaiming_uniform(rng, (c, hidden), hidden), "cwsa.w2.weight")
            self.params["cwsa.w2.bias"] = _param(np.zeros(c), "cwsa.w2.bias")

    def stage(self, index: int, h: Tensor) -> Tensor:
        p = self.params
        h = ops.relu(ops.conv2d(h, p[f"stage{index}.conv_a.weight"], p[f"stage{index}.conv_a.bias"],
                                stride=2, padding=1))
        return ops.relu(ops.conv2d(h, p[f"stage{index}.conv_b.weight"], p[f"stage{index}.conv_b.bias"],
                                   stride=1, padding=1))

    def cwsa_params(self) -> "CwsaParams | None":
        if not self.config.cwsa_enabled:
            return None
        p = self.params
        return CwsaParams(p["cwsa.w1.weight"], p["cwsa.w1.bias"], p["cwsa.w2.weight"], p["cwsa.w2.bias"])

    def head_map(self, h: Tensor) -> Tensor:
        cw = self.cwsa_params()
        return h if cw is None else cwsa_forward(h, cw)


@dataclass
class CwsaParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def cwsa_attention(x: Tensor, params: CwsaParams) -> Tensor:
    """Per-channel gate in (0, 1) from the channel means and variances of ``x``."""
    hw = x.shape[2:]
    mu = ops.channel_mean(x)
    centered = ops.add(x, ops.broadcast_channel(ops.scale(mu, -1.0), hw))
    var = ops.channel_mean(ops.square(centered))
    stats = ops.concat([mu, var], axis=1)
    hidden = ops.relu(ops.linear(stats, params.w1, params.b1))
    return ops.sigmoid(ops.linear(hidden, params.w2, params.b2))


def cwsa_forward(x: Tensor, params: CwsaParams) -> Tensor:
    """Rescale channels by ``1 + a`` (i.e. ``a * x + x``)."""
    if len(x.shape) != 4:
        raise ValueError(f"cwsa expects a B x C x H x W map, got {x.shape}")
    if params.w2.shape[0] != x.shape[1] or params.w1.shape[1] != 2 * x.shape[1]:
        raise ValueError(f"cwsa params built for {params.w2.shape[0]} channels, map has {x.shape[1]}")
    a = cwsa_attention(x, params)
    return ops.add(ops.mul(x, ops.broadcast_channel(a, x.shape[2:])), x)


@dataclass
class EncodeResult:
    features: Tensor
    intermediates: dict[str, Tensor]
    augmented: list[Tensor] = field(default_factory=list)


def encode(encoder: Encoder, batch, style_plan: StylePlan | None = None,
           pairing: Pairing | None = None) -> EncodeResult:
    """Pooled features for ``batch`` plus one augmented feature set per flow."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    size = encoder.config.input_size
    if len(x.shape) != 4 or x.shape[2:] != (size, size):
        raise ValueError(f"batch spatial size {x.shape[2:]} does not match input_size {size}")
    clean: dict[str, Tensor] = {}
    h = x
    for s, level in enumerate(LEVELS, start=1):
        h = encoder.stage(s, h)
        clean[level] = h
    features = ops.global_avg_pool(encoder.head_map(clean["H"]))

    augmented: list[Tensor] = []
    if style_plan is not None and style_plan.enabled:
        if pairing is None:
            raise ValueError(f"style plan {style_plan.name} requires a pairing")
        pairing.validate(style_plan)
        for flow in expand_flows(style_plan):
            start = min(LEVELS.index(lv) for lv in flow)
            h = style_cross_permuted(clean[LEVELS[start]], pairing.perms[LEVELS[start]])
            for s in range(start + 1, len(LEVELS)):
                h = encoder.stage(s + 1, h)
                if LEVELS[s] in flow:
                    h = style_cross_permuted(h, pairing.perms[LEVELS[s]])
            augmented.append(ops.global_avg_pool(encoder.head_map(h)))
    return EncodeResult(features, clean, augmented)


@dataclass
class HeadConfig:
    kind: str
    num_classes: int
    feature_dim: int

    def __post_init__(self):
        if self.kind not in ("classifier", "discriminator"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("a head needs at least two classes")


class Head:
    """Cosine-logit head: rows of the weight matrix are normalized at use."""

    def __init__(self, config: HeadConfig, rng: np.random.Generator):
        self.config = config
        self.params = Parameters()
        self.params["weight"] = _param(
            _kaiming_uniform(rng, (config.num_classes, config.feature_dim), config.feature_dim), "weight")

    @property
    def weight(self) -> Tensor:
        return self.params["weight"]


def head_forward(head: Head, features: Tensor, scale: float = 1.0,
                 detach_weights: bool = False) -> tuple[Tensor, Tensor]:
    """Return ``(probabilities, cosine_logits)`` for pooled ``features``."""
    if features.shape[-1] != head.config.feature_dim:
        raise ValueError(f"features of width {features.shape[-1]} do not match head width {head.config.feature_dim}")
    w = head.weight.detach() if detach_weights else head.weight
    cos = ops.matmul(ops.l2_normalize(features, axis=1), ops.transpose(ops.l2_normalize(w, axis=1)))
    probs = ops.softmax(ops.scale(cos, scale), axis=1)
    return probs, cos


def save_parameters(params: Parameters, directory, prefix: str = "") -> list[tuple[str, str, tuple]]:
    """Write each tensor as DLIF1 and return manifest rows ``(name, file, shape)``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, t in params.items():
        full = f"{prefix}{name}"
        fname = full + ".dlif"
        dlif_io.save(directory / fname, t.data)
        rows.append((full, fname, t.shape))
    return rows


def write_weight_manifest(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "file", "shape"])
        for name, fname, shape in rows:
            w.writerow([name, fname, "x".join(str(d) for d in shape)])


def read_weight_manifest(path) -> dict[str, tuple[str, tuple]]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            shape = tuple(int(d) for d in row["shape"].split("x")) if row["shape"] else ()
            out[row["name"]] = (row["file"], shape)
    return out


def load_parameters(params: Parameters, directory, manifest: dict, prefix: str = "") -> None:
    """Fill ``params`` in place from DLIF1 files listed in ``manifest``."""
    directory = Path(directory)
    for name, t in params.items():
        fname, shape = manifest[f"{prefix}{name}"]
        data = dlif_io.load(directory / fname)
        if data.shape != t.shape or tuple(shape) != t.shape:
            raise ValueError(f"{prefix}{name}: stored shape {data.shape} != model shape {t.shape}")
        t.data = data
