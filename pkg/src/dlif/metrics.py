"""Biometric scoring (AUC, EER, HTER), disentanglement probes, embedding export.

Scores are liveness scores: larger means "more live".  Labels use 0 for live
and 1 for spoof.  A sample is accepted as live when ``score >= threshold``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

LIVE, SPOOF = 0, 1


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    live, spoof = scores[labels == LIVE], scores[labels == SPOOF]
    if live.size == 0 or spoof.size == 0:
        raise ValueError("need at least one live and one spoof sample")
    return scores, labels, live, spoof


def roc_auc(scores, labels) -> float:
    """P(live score > spoof score) + 0.5 P(tie), via average ranks."""
    scores, labels, live, spoof = _split(scores, labels)
    ranks = rankdata(scores)
    n_live, n_spoof = live.size, spoof.size
    u = ranks[labels == LIVE].sum() - n_live * (n_live + 1) / 2.0
    return float(u / (n_live * n_spoof))


def far_frr(scores, labels, threshold: float) -> tuple[float, float]:
    _, _, live, spoof = _split(scores, labels)
    far = float(np.mean(spoof >= threshold))
    frr = float(np.mean(live < threshold))
    return far, frr


def hter(scores, labels, threshold: float) -> float:
    far, frr = far_frr(scores, labels, threshold)
    return (far + frr) / 2.0


def _candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    distinct = np.unique(scores)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate([[distinct[0] - 1.0], mids, [distinct[-1] + 1.0]])


def eer_threshold(scores, labels) -> tuple[float, float]:
    """Threshold where FAR and FRR are closest, scanning all score midpoints.

    Ties on ``|FAR - FRR|`` go to the smaller mean error, then the lower
    threshold.  Returns ``(threshold, (FAR + FRR) / 2)``.
    """
    scores, labels, live, spoof = _split(scores, labels)
    cands = _candidate_thresholds(scores)
    far = (spoof[None, :] >= cands[:, None]).mean(axis=1)
    frr = (live[None, :] < cands[:, None]).mean(axis=1)
    gap = np.abs(far - frr)
    err = (far + frr) / 2.0
    order = np.lexsort((cands, err, gap))
    best = order[0]
    return float(cands[best]), float(err[best])


@dataclass
class ProbeReport:
    mean_abs_cos: float
    identity_acc_u: float
    identity_acc_v: float
    liveness_acc_u: float
    liveness_acc_v: float
    identity_chance: float
    liveness_chance: float
    mean_live_prob_deviation_v: float | None = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def nearest_centroid_accuracy(features, labels) -> float:
    """Two-fold nearest-centroid accuracy on cosine geometry.

    Within each class, samples alternate between fold A and fold B in input
    order; centroids fitted on one fold classify the other, and the two
    accuracies are averaged.
    """
    x = _normalize_rows(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("probe needs at least two classes")
    fold = np.zeros(labels.size, dtype=np.int64)
    for c in classes:
        idx = np.flatnonzero(labels == c)
        fold[idx] = np.arange(idx.size) % 2
    accs = []
    for fit in (0, 1):
        tr, te = fold == fit, fold != fit
        present = np.array([c for c in classes if np.any(tr & (labels == c))])
        cents = _normalize_rows(np.stack([x[tr & (labels == c)].mean(axis=0) for c in present]))
        pred = present[np.argmax(x[te] @ cents.T, axis=1)]
        accs.append(np.mean(pred == labels[te]))
    return float(np.mean(accs))


def probe_disentanglement(features_u, features_v, identity_labels, liveness_labels,
                          live_prob_v=None) -> ProbeReport:
    """Cross-space cosine, nearest-centroid probes, and classifier ambiguity on f_v."""
    fu = np.asarray(features_u, dtype=np.float64)
    fv = np.asarray(features_v, dtype=np.float64)
    ident = np.asarray(identity_labels)
    live = np.asarray(liveness_labels)
    if not (len(fu) == len(fv) == len(ident) == len(live)):
        raise ValueError("features and labels must have matching lengths")
    if np.unique(ident).size < 2 or np.unique(live).size < 2:
        raise ValueError("probe needs at least two identities and both liveness classes")
    cos = _normalize_rows(fu) @ _normalize_rows(fv).T
    dev = None
    if live_prob_v is not None:
        dev = float(np.mean(np.abs(np.asarray(live_prob_v) - 0.5)))
    return ProbeReport(
        mean_abs_cos=float(np.mean(np.abs(cos))),
        identity_acc_u=nearest_centroid_accuracy(fu, ident),
        identity_acc_v=nearest_centroid_accuracy(fv, ident),
        liveness_acc_u=nearest_centroid_accuracy(fu, live),
        liveness_acc_v=nearest_centroid_accuracy(fv, live),
        identity_chance=1.0 / np.unique(ident).size,
        liveness_chance=1.0 / np.unique(live).size,
        mean_live_prob_deviation_v=dev,
    )


def export_embeddings(features, identity, liveness, domain, out_file) -> Path:
    """Write ``dim_0..dim_{N-1}, identity, liveness, domain`` rows as CSV."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats.reshape(0, 0) if feats.size == 0 else feats[None]
    n_dim = feats.shape[1] if feats.ndim == 2 else 0
    out_file = Path(out_file)
    with open(out_file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"dim_{k}" for k in range(n_dim)] + ["identity", "liveness", "domain"])
        for row, i, lv, d in zip(feats, identity, liveness, domain):
            w.writerow([repr(float(v)) for v in row] + [int(i), int(lv), int(d)])
    return out_file


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_dim = len(header) - 3
        rows = list(reader)
    feats = np.array([[float(v) for v in r[:n_dim]] for r in rows], dtype=np.float64).reshape(len(rows), n_dim)
    ints = np.array([[int(v) for v in r[n_dim:]] for r in rows], dtype=np.int64).reshape(len(rows), 3)
    return feats, ints[:, 0], ints[:, 1], ints[:, 2]
