"""Objective terms for the liveness (FAS) and identity (FR) branches."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from dlif.tensor import Tensor
from dlif.tensor import ops

LIVE, SPOOF = 0, 1
AAIC_FORMS = ("as_written", "log")
_MASK = -1e30
NORM_TOL = 1e-3


class NonFiniteLossError(ArithmeticError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term} is not finite ({value})")
        self.term = term


@dataclass
class LossWeights:
    lambda_aaic_u: float = 1.0
    lambda_idamb: float = 1.0
    lambda_ortho_u: float = 1.0
    lambda_aaic_v: float = 1.0
    lambda_liamb: float = 1.0
    lambda_ortho_v: float = 1.0
    tau: float = 0.07
    am_scale: float = 30.0
    m_live: float = 0.4
    m_spoof: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.am_scale <= 0:
            raise ValueError("am_scale must be positive")
        for m in (self.m_live, self.m_spoof):
            if not 0 <= m < 1:
                raise ValueError("margins must lie in [0, 1)")


def _const(array) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64))


def _row_broadcast(col: Tensor, width: int) -> Tensor:
    """(P, 1) -> (P, width) by repeating the column."""
    return ops.matmul(col, _const(np.ones((1, width))))


def log_softmax_rows(z: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor, shifted by the (constant) row max."""
    width = z.shape[1]
    shift = _const(z.data.max(axis=1, keepdims=True))
    shifted = ops.add(z, ops.scale(_row_broadcast(shift, width), -1.0))
    lse = ops.add(ops.log(ops.sum(ops.exp(shifted), axis=1, keepdims=True)), shift)
    return ops.add(z, ops.scale(_row_broadcast(lse, width), -1.0))


def _check_normalized(name: str, f: Tensor) -> None:
    norms = np.linalg.norm(f.data, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise ValueError(f"{name} rows must be L2-normalized (max deviation {np.abs(norms - 1).max():.3g})")


def orthogonality_loss(f_u: Tensor, f_v: Tensor) -> Tensor:
    """Mean squared cosine similarity over every (u_i, v_j) pair in the batch."""
    if f_u.shape != f_v.shape or len(f_u.shape) != 2:
        raise ValueError(f"feature batches {f_u.shape} and {f_v.shape} must both be B x N")
    _check_normalized("F_u", f_u)
    _check_normalized("F_v", f_v)
    sim = ops.matmul(f_u, ops.transpose(f_v))
    return ops.mean(ops.square(sim))


def ambiguity_loss(probs: Tensor, target: float | None = None) -> Tensor:
    """Mean squared distance of each probability row from the uniform vector."""
    if len(probs.shape) != 2:
        raise ValueError(f"probabilities must be B x K, got {probs.shape}")
    b, k = probs.shape
    if k < 2:
        raise ValueError("ambiguity needs at least two classes")
    if np.any(np.abs(probs.data.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1")
    target = 1.0 / k if target is None else target
    dev = ops.add(probs, _const(np.full(probs.shape, -target)))
    return ops.scale(ops.sum(ops.square(dev)), 1.0 / b)


def fas_contrast_labels(liveness, n_views: int = 1) -> np.ndarray:
    """Live views share label 0; spoof ``i`` and its augmentations share ``i + 1``."""
    liveness = np.asarray(liveness)
    base = np.where(liveness == LIVE, 0, np.arange(liveness.size) + 1)
    return np.tile(base, n_views)


def fr_contrast_labels(identity, n_views: int = 1) -> np.ndarray:
    """All views of one identity share that identity as label."""
    return np.tile(np.asarray(identity), n_views)


def _positive_mask(labels: np.ndarray) -> np.ndarray:
    pos = labels[:, None] == labels[None, :]
    np.fill_diagonal(pos, False)
    return pos


def _masked_logits(views: Tensor, tau: float) -> Tensor:
    p = views.shape[0]
    z = ops.l2_normalize(views, axis=1)
    sim = ops.matmul(z, ops.transpose(z))
    return ops.add(ops.scale(sim, 1.0 / tau), _const(np.diag(np.full(p, _MASK))))


def aaic_loss(views: Tensor, labels, tau: float = 0.07, form: str = "as_written") -> Tensor:
    """Asymmetric augmented instance contrast over a pool of P views.

    ``as_written`` sums the softmax mass each anchor puts on its positives;
    ``log`` averages log-probabilities of positives per anchor.  Both are
    normalized by the pool size; anchors without positives add nothing.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if form not in AAIC_FORMS:
        raise ValueError(f"unknown aaic form {form!r}; valid: {AAIC_FORMS}")
    labels = np.asarray(labels)
    p = views.shape[0]
    if p < 2 or labels.shape != (p,):
        raise ValueError(f"need at least two views with one label each, got {p} views / {labels.shape} labels")
    pos = _positive_mask(labels)
    logits = _masked_logits(views, tau)
    if form == "as_written":
        prob = ops.softmax(logits, axis=1)
        return ops.scale(ops.sum(ops.mul(prob, _const(pos))), -1.0 / p)
    counts = pos.sum(axis=1, keepdims=True)
    weights = np.divide(pos, counts, out=np.zeros(pos.shape), where=counts > 0)
    logp = log_softmax_rows(logits)
    return ops.scale(ops.sum(ops.mul(logp, _const(weights))), -1.0 / p)


def binary_contrast_loss(views: Tensor, liveness, tau: float = 0.07, form: str = "as_written",
                         n_views: int = 1) -> Tensor:
    """Baseline contrast treating all spoofs as one class."""
    labels = np.tile(np.asarray(liveness), n_views)
    return aaic_loss(views, labels, tau, form)


def asym_triplet_labels(liveness, domain) -> np.ndarray:
    """Live samples form one class; spoofs are split by source domain."""
    liveness, domain = np.asarray(liveness), np.asarray(domain)
    return np.where(liveness == LIVE, 0, 1 + domain)


def triplet_loss(views: Tensor, labels, margin: float = 0.1) -> Tensor:
    """Batch-all triplet loss on squared distances of normalized features."""
    labels = np.asarray(labels)
    p = views.shape[0]
    z = ops.l2_normalize(views, axis=1)
    dist = ops.add(ops.scale(ops.matmul(z, ops.transpose(z)), -2.0), _const(np.full((p, p), 2.0)))
    same = _positive_mask(labels)
    diff = labels[:, None] != labels[None, :]
    a_idx, p_idx, n_idx = [], [], []
    for a in range(p):
        pos = np.flatnonzero(same[a])
        neg = np.flatnonzero(diff[a])
        if pos.size and neg.size:
            pp, nn = np.meshgrid(pos, neg, indexing="ij")
            a_idx.append(np.full(pp.size, a))
            p_idx.append(pp.ravel())
            n_idx.append(nn.ravel())
    if not a_idx:
        return ops.scale(ops.sum(views), 0.0)
    a_idx, p_idx, n_idx = (np.concatenate(v) for v in (a_idx, p_idx, n_idx))
    d_ap = ops.take(dist, (a_idx, p_idx))
    d_an = ops.take(dist, (a_idx, n_idx))
    gap = ops.add(ops.add(d_ap, ops.scale(d_an, -1.0)), _const(np.full(a_idx.size, margin)))
    return ops.mean(ops.relu(gap))


def asym_am_softmax(cosines: Tensor, labels, s: float = 30.0, m_live: float = 0.4,
                    m_spoof: float = 0.1) -> Tensor:
    """Additive-margin softmax with a class-dependent margin (live vs spoof)."""
    labels = np.asarray(labels)
    b = labels.size
    if cosines.shape != (b, 2):
        raise ValueError(f"cosines must be B x 2, got {cosines.shape}")
    if not np.all(np.isin(labels, (LIVE, SPOOF))):
        raise ValueError("liveness labels must be 0 (live) or 1 (spoof)")
    onehot = np.zeros((b, 2))
    onehot[np.arange(b), labels] = 1.0
    margin = onehot * np.where(labels == LIVE, m_live, m_spoof)[:, None]
    logits = ops.scale(ops.add(cosines, _const(-margin)), s)
    logp = log_softmax_rows(logits)
    return ops.scale(ops.sum(ops.mul(logp, _const(onehot))), -1.0 / b)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of integer ``labels`` under row ``logits``."""
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be {b} integers in [0, {k})")
    logp = log_softmax_rows(logits)
    return ops.scale(ops.sum(ops.take(logp, (np.arange(b), labels))), -1.0 / b)


FAS_TERMS = ("L_cls", "L_aaicU", "L_idamb", "L_orthoU")
FR_TERMS = ("L_id", "L_aaicV", "L_liamb", "L_orthoV")


def _compose(parts: Mapping[str, Tensor | None], weights: Mapping[str, float], head: str) -> Tensor:
    total = None
    for name, term in parts.items():
        if term is None:
            continue
        value = term.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
        w = 1.0 if name == head else weights[name]
        if w == 0.0 and name != head:
            continue
        piece = term if w == 1.0 else ops.scale(term, w)
        total = piece if total is None else ops.add(total, piece)
    if total is None:
        raise ValueError(f"no {head} term supplied")
    return total


def compose_fas_loss(parts: Mapping[str, Tensor | None], weights: LossWeights) -> Tensor:
    """``L_cls + l_aaicU L_aaicU + l_idamb L_idamb + l_orthoU L_orthoU``."""
    return _compose(parts, {"L_aaicU": weights.lambda_aaic_u, "L_idamb": weights.lambda_idamb,
                            "L_orthoU": weights.lambda_ortho_u}, "L_cls")


def compose_fr_loss(parts: Mapping[str, Tensor | None], weights: LossWeights) -> Tensor:
    """``L_id + l_aaicV L_aaicV + l_liamb L_liamb + l_orthoV L_orthoV``."""
    return _compose(parts, {"L_aaicV": weights.lambda_aaic_v, "L_liamb": weights.lambda_liamb,
                            "L_orthoV": weights.lambda_ortho_v}, "L_id")
