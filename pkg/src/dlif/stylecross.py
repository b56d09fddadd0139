"""Channel-statistic style exchange between samples sharing a label.

Encoder levels are named L (low), M (middle) and H (high).  A plan either
cascades the exchange through all its levels in one pass (``x``) or runs one
pass per level (``+``), each producing its own augmented view.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dlif.tensor import Tensor
from dlif.tensor import ops

LEVELS = ("L", "M", "H")
MODES = ("cascaded", "parallel")
MAX_DERANGE_TRIES = 16

# column order of the flow ablation
FLOW_NAMES = ("L", "M", "H", "LxM", "LxH", "MxH", "LxMxH", "L+M", "L+H", "M+H", "L+M+H")


@dataclass(frozen=True)
class StylePlan:
    active_levels: tuple[str, ...] = ()
    mode: str = "parallel"

    def __post_init__(self):
        levels = tuple(lv for lv in LEVELS if lv in set(self.active_levels))
        unknown = set(self.active_levels) - set(LEVELS)
        if unknown:
            raise ValueError(f"unknown style levels {sorted(unknown)}; valid: {LEVELS}")
        if self.mode not in MODES:
            raise ValueError(f"unknown style mode {self.mode!r}; valid: {MODES}")
        object.__setattr__(self, "active_levels", levels)

    @property
    def enabled(self) -> bool:
        return bool(self.active_levels)

    @property
    def name(self) -> str:
        if not self.active_levels:
            return "none"
        sep = "x" if self.mode == "cascaded" else "+"
        return sep.join(self.active_levels)

    @classmethod
    def parse(cls, text: str) -> "StylePlan":
        """Parse flow names such as ``M+H``, ``LxM`` or ``none``."""
        text = text.strip()
        if text in ("", "none"):
            return cls()
        if "+" in text and "x" in text:
            raise ValueError(f"flow {text!r} mixes cascaded and parallel")
        if "+" in text:
            return cls(tuple(text.split("+")), "parallel")
        return cls(tuple(text.split("x")), "cascaded")


def expand_flows(plan: StylePlan) -> list[frozenset]:
    """Level sets per augmented forward pass."""
    if not plan.active_levels:
        raise ValueError("style plan has no active levels")
    if plan.mode == "cascaded" or len(plan.active_levels) == 1:
        return [frozenset(plan.active_levels)]
    return [frozenset([lv]) for lv in plan.active_levels]


def _restyle(content: Tensor, mu_c: Tensor, sd_c: Tensor, mu_s: Tensor, sd_s: Tensor) -> Tensor:
    hw = content.shape[2:]
    ratio = ops.mul(sd_s, ops.reciprocal(sd_c))
    centered = ops.add(content, ops.broadcast_channel(ops.scale(mu_c, -1.0), hw))
    return ops.add(ops.mul(centered, ops.broadcast_channel(ratio, hw)), ops.broadcast_channel(mu_s, hw))


def style_cross(content: Tensor, style: Tensor) -> Tensor:
    """Give each content map the per-channel mean/std of the matching style map.

    Both inputs are (N, C, H, W).  Standard deviations carry the engine's
    epsilon inside the square root, so a flat content channel becomes the
    style mean and ``style_cross(a, a)`` returns ``a``.
    """
    if content.shape != style.shape:
        raise ValueError(f"style_cross: content {content.shape} and style {style.shape} differ")
    return _restyle(content, ops.channel_mean(content), ops.channel_std(content),
                    ops.channel_mean(style), ops.channel_std(style))


def style_cross_permuted(x: Tensor, perm: np.ndarray) -> Tensor:
    """Restyle sample i of ``x`` with the statistics of sample ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (x.shape[0],):
        raise ValueError(f"permutation length {perm.shape} does not match batch {x.shape[0]}")
    mu, sd = ops.channel_mean(x), ops.channel_std(x)
    return _restyle(x, mu, sd, ops.take(mu, perm), ops.take(sd, perm))


def make_pairing(labels, rng: np.random.Generator) -> np.ndarray:
    """Random permutation closed within each label group.

    Each group gets a uniform permutation, redrawn up to 16 times while it
    has fixed points; singleton groups map to themselves.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("make_pairing needs at least one label")
    pi = np.arange(labels.size)
    for key in np.unique(labels):
        idx = np.flatnonzero(labels == key)
        if idx.size == 1:
            continue
        for _ in range(MAX_DERANGE_TRIES):
            local = rng.permutation(idx.size)
            if not np.any(local == np.arange(idx.size)):
                break
        pi[idx] = idx[local]
    return pi


@dataclass
class Pairing:
    """Per-level permutations plus the group keys they must respect."""

    perms: dict[str, np.ndarray] = field(default_factory=dict)
    groups: np.ndarray | None = None

    def validate(self, plan: StylePlan) -> None:
        for level in plan.active_levels:
            if level not in self.perms:
                raise ValueError(f"style plan {plan.name} is missing a permutation for level {level}")
        if self.groups is not None:
            groups = np.asarray(self.groups)
            for level, perm in self.perms.items():
                if np.any(groups[perm] != groups):
                    raise ValueError(f"permutation at level {level} pairs samples from different groups")


def make_level_pairings(plan: StylePlan, labels, rng: np.random.Generator) -> Pairing:
    """Fresh label-safe permutation for every active level."""
    labels = np.asarray(labels)
    return Pairing({lv: make_pairing(labels, rng) for lv in plan.active_levels}, labels)
