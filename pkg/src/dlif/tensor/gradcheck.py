"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from dlif.tensor.core import Tensor, backward

DENOM_FLOOR = 1e-8


@dataclass
class ParamCheck:
    name: str
    n_checked: int
    max_rel_error: float
    worst_index: tuple | None


@dataclass
class GradCheckReport:
    tol: float
    step: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return all(p.max_rel_error <= self.tol for p in self.params)

    @property
    def failures(self) -> list[ParamCheck]:
        return [p for p in self.params if p.max_rel_error > self.tol]


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-4,
    tol: float = 1e-3,
    max_elements: int = 1000,
    rng: np.random.Generator | None = None,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` against central differences.

    Parameters with more than ``max_elements`` entries are checked on a
    random subsample.  ``f`` must rebuild its graph from the current
    ``param.data`` on every call.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport(tol=tol, step=step)
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        if flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        else:
            idx = np.arange(flat.size)
        worst, worst_at = 0.0, None
        ana_flat = analytic[k].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = ana_flat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), DENOM_FLOOR)
            if rel > worst:
                worst, worst_at = rel, np.unravel_index(i, p.shape)
        name = names[k] if names is not None else (p.name or f"param{k}")
        report.params.append(ParamCheck(name, int(idx.size), float(worst), worst_at))
    for p in params:
        p.grad = None
    return report
