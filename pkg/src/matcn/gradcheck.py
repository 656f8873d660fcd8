"""Compare tape gradients with central finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tape, Tensor

# Denominator floor for the relative error, so parameters whose true
# gradient is ~0 are judged by absolute error instead.
ERROR_FLOOR = 1e-7


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    n_checked: int


@dataclass
class GradCheckReport:
    label: str
    tol: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def lines(self) -> list[str]:
        status = "PASS" if self.passed else "FAIL"
        out = [f"{status} {self.label} max_rel_error={self.max_rel_error:.3e} tol={self.tol:g}"]
        for p in self.params:
            out.append(f"    {p.name:<32s} {p.max_rel_error:.3e} ({p.n_checked} entries)")
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|_inf, |n|_inf, floor) over one parameter tensor."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), ERROR_FLOOR)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def grad_check(f: Callable[[dict[str, Tensor]], Tensor], params: dict[str, Tensor],
               step: float = 1e-5, tol: float = 1e-3, label: str = "f",
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Check ``f``'s reverse-mode gradients entry by entry.

    ``f`` maps a parameter dict to a scalar tensor and must be deterministic.
    With ``max_entries`` set, a seeded random subset of each parameter's
    entries is differenced instead of all of them.
    """
    leaves = {k: Tensor(v.data, requires_grad=True, name=k) for k, v in params.items()}
    with Tape() as tape:
        loss = f(leaves)
    grads = tape.backward(loss)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(label=label, tol=tol)
    for name, leaf in leaves.items():
        analytic = grads.get(leaf, np.zeros(leaf.shape)).reshape(-1)
        base = leaf.data.reshape(-1)
        idx = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            idx = np.sort(rng.choice(base.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert[i] += sign * step
                trial = dict(leaves)
                trial[name] = Tensor(pert.reshape(leaf.shape))
                vals.append(f(trial).item())
            numeric[j] = (vals[0] - vals[1]) / (2.0 * step)
        report.params.append(ParamCheck(name, relative_error(analytic[idx], numeric), idx.size))
    return report
