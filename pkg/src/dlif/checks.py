"""Finite-difference checks over every primitive and every objective term.

Each check builds a scalar function of freshly drawn float64 leaves and
compares backprop against central differences.  Primitive outputs are
contracted with a fixed random tensor so that gradients which would cancel
under a plain sum (softmax, l2_normalize) are still exercised.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from dlif import losses as L
from dlif.networks import Encoder, EncoderConfig, Head, HeadConfig, encode, head_forward
from dlif.stylecross import StylePlan, make_level_pairings, style_cross
from dlif.tensor import PrimitiveKind, Tensor, ops
from dlif.tensor.gradcheck import GradCheckReport, finite_diff_check

STEP = 1e-4
TOL = 1e-3
KINK_GAP = 1e-2
KINK_MARGIN = 2e-3


def _leaf(rng, shape, away_from_zero=False, positive=False, name=None) -> Tensor:
    a = rng.normal(size=shape)
    if positive:
        a = np.abs(a) + 0.5
    elif away_from_zero:
        a = np.where(np.abs(a) < KINK_GAP, np.sign(a + 1e-30) * (KINK_GAP + np.abs(a)), a)
    return Tensor(a, requires_grad=True, name=name)


def _contract(out: Tensor, probe: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(probe)))


def _primitive_cases(rng) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    cases = []

    def add(name, fn, leaves):
        out_shape = fn(*leaves).shape
        probe = rng.normal(size=out_shape)
        cases.append((name, lambda: _contract(fn(*leaves), probe), leaves))

    add("conv2d", lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
        [_leaf(rng, (2, 3, 6, 6)), _leaf(rng, (4, 3, 3, 3)), _leaf(rng, (4,))])
    add("linear", ops.linear, [_leaf(rng, (3, 5)), _leaf(rng, (4, 5)), _leaf(rng, (4,))])
    add("relu", ops.relu, [_leaf(rng, (3, 4), away_from_zero=True)])
    add("sigmoid", ops.sigmoid, [_leaf(rng, (3, 4))])
    add("softmax", lambda x: ops.softmax(x, axis=1), [_leaf(rng, (3, 5))])
    add("l2_normalize", lambda x: ops.l2_normalize(x, axis=1), [_leaf(rng, (3, 5))])
    add("channel_mean", ops.channel_mean, [_leaf(rng, (2, 3, 4, 4))])
    add("channel_std", ops.channel_std, [_leaf(rng, (2, 3, 4, 4))])
    add("global_avg_pool", ops.global_avg_pool, [_leaf(rng, (2, 3, 4, 4))])
    add("concat", lambda a, b: ops.concat([a, b], axis=0), [_leaf(rng, (2, 3)), _leaf(rng, (4, 3))])
    add("add", ops.add, [_leaf(rng, (3, 4)), _leaf(rng, (3, 4))])
    add("mul", ops.mul, [_leaf(rng, (3, 4)), _leaf(rng, (3, 4))])
    add("scale", lambda x: ops.scale(x, -1.7), [_leaf(rng, (3, 4))])
    add("matmul", ops.matmul, [_leaf(rng, (3, 4)), _leaf(rng, (4, 2))])
    add("transpose", lambda x: ops.transpose(x, (1, 0, 2)), [_leaf(rng, (2, 3, 4))])
    add("sum", lambda x: ops.sum(x, axis=1, keepdims=True), [_leaf(rng, (3, 4))])
    add("mean", lambda x: ops.mean(x, axis=0), [_leaf(rng, (3, 4))])
    add("square", ops.square, [_leaf(rng, (3, 4))])
    add("log", ops.log, [_leaf(rng, (3, 4), positive=True)])
    add("exp", ops.exp, [_leaf(rng, (3, 4))])
    add("slice", lambda x: ops.take(x, (np.array([0, 2, 2]), np.array([1, 0, 3]))), [_leaf(rng, (3, 4))])
    add("broadcast_channel", lambda v: ops.broadcast_channel(v, (3, 2)), [_leaf(rng, (2, 4))])
    return cases


def _relu_margin(outputs) -> float:
    """Smallest |input| over every ReLU feeding ``outputs``."""
    seen, stack, margin = set(), list(outputs), np.inf
    while stack:
        node = stack.pop()
        rec = node.op_record
        if rec is None or id(node) in seen:
            continue
        seen.add(id(node))
        if rec.kind is PrimitiveKind.RELU:
            margin = min(margin, float(np.abs(rec.parents[0].data).min()))
        stack.extend(rec.parents)
    return margin


def _tiny_models(rng):
    cfg = EncoderConfig(input_size=8, stage_channels=(3, 4, 4), feature_dim=4, cwsa_enabled=True,
                        cwsa_reduction=2)
    u = Encoder(cfg, rng)
    v = Encoder(EncoderConfig(8, (3, 4, 4), 4, False), rng)
    c = Head(HeadConfig("classifier", 2, 4), rng)
    d = Head(HeadConfig("discriminator", 3, 4), rng)
    # zero biases would put dead units exactly on the ReLU kink
    for enc in (u, v):
        for name, t in enc.params.items():
            if name.endswith("bias"):
                t.data = rng.uniform(0.05, 0.3, size=t.shape)
    return u, v, c, d


def _loss_cases(rng) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    cases = []
    fu, fv = _leaf(rng, (4, 8)), _leaf(rng, (4, 8))
    cases.append(("orthogonality", lambda: L.orthogonality_loss(ops.l2_normalize(fu, 1), ops.l2_normalize(fv, 1)),
                  [fu, fv]))

    z_d, z_c = _leaf(rng, (5, 6)), _leaf(rng, (5, 2))
    cases.append(("identity_ambiguity", lambda: L.ambiguity_loss(ops.softmax(z_d, axis=1)), [z_d]))
    cases.append(("liveness_ambiguity", lambda: L.ambiguity_loss(ops.softmax(z_c, axis=1)), [z_c]))

    views = _leaf(rng, (8, 5))
    labels = L.fas_contrast_labels(np.array([0, 1, 0, 1]), 2)
    for form in L.AAIC_FORMS:
        cases.append((f"aaic_{form}", lambda form=form: L.aaic_loss(views, labels, 0.5, form), [views]))

    cos = Tensor(np.tanh(rng.normal(size=(6, 2))), requires_grad=True)
    live = np.array([0, 1, 0, 1, 1, 0])
    cases.append(("asym_am_softmax", lambda: L.asym_am_softmax(cos, live, 5.0, 0.4, 0.1), [cos]))

    logits = _leaf(rng, (6, 4))
    ids = np.array([0, 1, 2, 3, 1, 0])
    cases.append(("identity_cross_entropy", lambda: L.cross_entropy(logits, ids), [logits]))

    # composed objectives through tiny networks with style cross and attention
    x = Tensor(rng.uniform(size=(4, 3, 8, 8)))
    liveness = np.array([0, 0, 1, 1])
    identity = np.array([0, 1, 0, 1])
    plan = StylePlan(("M", "H"), "parallel")
    weights = L.LossWeights(tau=0.5, am_scale=5.0)
    # redraw until no ReLU input sits within a step of its kink and no feature row is dead
    for _ in range(2000):
        u, v, c, d = _tiny_models(rng)
        pair_u = make_level_pairings(plan, liveness, rng)
        pair_v = make_level_pairings(plan, identity, rng)
        runs = [encode(u, x, plan, pair_u), encode(v, x, plan, pair_v)]
        outs = [t for r in runs for t in [r.features] + r.augmented]
        if min(np.linalg.norm(t.data, axis=1).min() for t in outs) > 1e-3 and _relu_margin(outs) > KINK_MARGIN:
            break

    def fas():
        eu = encode(u, x, plan, pair_u)
        fv_det = encode(v, x).features.detach()
        _, cos_c = head_forward(c, eu.features)
        probs_d, _ = head_forward(d, eu.features, detach_weights=True)
        pool = ops.concat([eu.features] + eu.augmented, axis=0)
        parts = {"L_cls": L.asym_am_softmax(cos_c, liveness, weights.am_scale),
                 "L_aaicU": L.aaic_loss(pool, L.fas_contrast_labels(liveness, 3), weights.tau),
                 "L_idamb": L.ambiguity_loss(probs_d),
                 "L_orthoU": L.orthogonality_loss(ops.l2_normalize(eu.features, 1), ops.l2_normalize(fv_det, 1))}
        return L.compose_fas_loss(parts, weights)

    def fr():
        ev = encode(v, x, plan, pair_v)
        fu_det = encode(u, x).features.detach()
        _, cos_d = head_forward(d, ev.features)
        probs_c, _ = head_forward(c, ev.features, detach_weights=True)
        pool = ops.concat([ev.features] + ev.augmented, axis=0)
        parts = {"L_id": L.cross_entropy(cos_d, np.array([0, 1, 2, 0])),
                 "L_aaicV": L.aaic_loss(pool, L.fr_contrast_labels(identity, 3), weights.tau),
                 "L_liamb": L.ambiguity_loss(probs_c),
                 "L_orthoV": L.orthogonality_loss(ops.l2_normalize(fu_det, 1), ops.l2_normalize(ev.features, 1))}
        return L.compose_fr_loss(parts, weights)

    cases.append(("fas_objective", fas, list(u.params.values()) + list(c.params.values())))
    cases.append(("fr_objective", fr, list(v.params.values()) + list(d.params.values())))

    content, style = _leaf(rng, (2, 3, 4, 4)), _leaf(rng, (2, 3, 4, 4))
    probe = rng.normal(size=(2, 3, 4, 4))
    cases.append(("style_cross", lambda: _contract(style_cross(content, style), probe), [content, style]))
    return cases


def run_all_checks(seed: int = 0, step: float = STEP, tol: float = TOL,
                   include: str = "all") -> list[tuple[str, GradCheckReport]]:
    """Return ``(name, report)`` for every primitive (``include='primitives'``), loss, or both."""
    rng = np.random.default_rng(seed)
    cases = []
    if include in ("all", "primitives"):
        cases += _primitive_cases(rng)
    if include in ("all", "losses"):
        cases += _loss_cases(rng)
    results = []
    for name, fn, leaves in cases:
        names = [t.name or f"{name}[{k}]" for k, t in enumerate(leaves)]
        results.append((name, finite_diff_check(fn, leaves, step, tol, rng=np.random.default_rng(seed),
                                                names=names)))
    return results
