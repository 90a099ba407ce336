"""Finite-difference verification of the hand-written backward rules.

``check_gradients`` re-evaluates the loss with central differences around
each probed parameter entry and compares against the reverse-mode value.
Large tensors are probed on a deterministic subset of entries; the probe
positions come from a fixed Rng so reports are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError
from .rng import Rng
from .tensor import Tensor


@dataclass
class ParamReport:
    name: str
    max_rel_err: float
    worst_index: tuple
    checked: int


@dataclass
class GradCheckReport:
    params: list[ParamReport] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def worst(self) -> list[ParamReport]:
        return sorted(self.params, key=lambda p: -p.max_rel_err)

    def summary(self) -> str:
        lines = [f"max relative error: {self.max_rel_err:.3e}"]
        for p in self.worst()[:5]:
            lines.append(
                f"  {p.name}: rel_err={p.max_rel_err:.3e} at {p.worst_index} "
                f"({p.checked} entries checked)"
            )
        return "\n".join(lines)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def check_gradients(
    f,
    params: dict[str, Tensor],
    eps: float = 1e-5,
    max_entries_per_param: int = 16,
    probe_seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar `f()` to central differences.

    `f` must be deterministic given `params` (re-run three times per probed
    entry).  Entries are probed exhaustively up to `max_entries_per_param`,
    beyond that on a seeded random subset.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericalError("loss is non-finite; cannot check gradients")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    rng = Rng(probe_seed)
    report = GradCheckReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_entries_per_param:
            idxs = np.arange(n)
        else:
            idxs = rng.child(f"probe.{name}").permutation(n)[:max_entries_per_param]
        worst = 0.0
        worst_idx: tuple = ()
        for i in idxs:
            orig = flat[i]
            h = eps * (1.0 + abs(orig))
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            ad = analytic[name].reshape(-1)[i]
            err = _rel_err(ad, fd)
            if err > worst:
                worst = err
                worst_idx = np.unravel_index(i, p.data.shape)
        report.params.append(
            ParamReport(name=name, max_rel_err=worst, worst_index=tuple(int(v) for v in worst_idx), checked=len(idxs))
        )
    return report
