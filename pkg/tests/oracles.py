"""Straight-line numpy reference implementations used as test oracles.

They share no code with the package: loops over pairs and thresholds,
no vectorized tricks, so a bug in one place cannot hide in both.
"""
import math

import numpy as np


def unit_rows(x):
    return np.array([r / math.sqrt(sum(v * v for v in r)) for r in np.asarray(x, dtype=float)])


def orthogonality(fu, fv):
    b = len(fu)
    total = 0.0
    for i in range(b):
        for j in range(b):
            total += float(np.dot(fu[i], fv[j])) ** 2
    return total / (b * b)


def aaic(views, labels, tau, form):
    z = unit_rows(views)
    p = len(z)
    total = 0.0
    for i in range(p):
        denom = sum(math.exp(float(np.dot(z[i], z[k])) / tau) for k in range(p) if k != i)
        pos = [j for j in range(p) if j != i and labels[j] == labels[i]]
        if not pos:
            continue
        terms = [math.exp(float(np.dot(z[i], z[j])) / tau) / denom for j in pos]
        if form == "as_written":
            total += sum(terms)
        else:
            total += sum(math.log(t) for t in terms) / len(pos)
    return -total / p


def auc(scores, labels):
    live = [s for s, y in zip(scores, labels) if y == 0]
    spoof = [s for s, y in zip(scores, labels) if y == 1]
    acc = 0.0
    for a in live:
        for b in spoof:
            acc += 1.0 if a > b else 0.5 if a == b else 0.0
    return acc / (len(live) * len(spoof))


def rates(scores, labels, t):
    live = [s for s, y in zip(scores, labels) if y == 0]
    spoof = [s for s, y in zip(scores, labels) if y == 1]
    far = sum(1 for s in spoof if s >= t) / len(spoof)
    frr = sum(1 for s in live if s < t) / len(live)
    return far, frr


def hter(scores, labels, t):
    far, frr = rates(scores, labels, t)
    return (far + frr) / 2


def eer_scan(scores, labels):
    """Best (gap, mean error, threshold) over every midpoint and both ends."""
    d = sorted(set(float(s) for s in scores))
    cands = [d[0] - 1.0] + [(a + b) / 2 for a, b in zip(d, d[1:])] + [d[-1] + 1.0]
    best = None
    for t in cands:
        far, frr = rates(scores, labels, t)
        key = (abs(far - frr), (far + frr) / 2, t)
        if best is None or key < best:
            best = key
    return best[2], best[1]


def softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def cross_entropy(logits, labels):
    return sum(-math.log(softmax(list(row))[y]) for row, y in zip(logits, labels)) / len(labels)
