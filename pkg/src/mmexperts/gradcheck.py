"""Central finite-difference verification of analytic gradients (float64)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class GradReport:
    max_rel_error: float
    worst: str
    checked: int

    def ok(self, tol):
        return self.max_rel_error < tol


def grad_check(fn, inputs, h=1e-5, max_entries=64, seed=0, floor=1e-8):
    """Compare d fn / d input against central differences.

    ``fn`` maps a list of Tensors to a scalar Tensor. ``inputs`` are numpy
    arrays (cast to float64). At most ``max_entries`` coordinates per input
    are probed, picked by a seeded RNG. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    arrs = [np.array(a, dtype=np.float64) for a in inputs]
    ts = [Tensor(a, requires_grad=True) for a in arrs]
    out = fn(ts)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar output")
    out.backward()
    rng = np.random.default_rng(seed)
    worst, worst_where, count = 0.0, "", 0
    for k, (a, t) in enumerate(zip(arrs, ts)):
        analytic = np.zeros_like(a) if t.grad is None else t.grad
        flat = np.arange(a.size)
        if a.size > max_entries:
            flat = rng.choice(a.size, max_entries, replace=False)
        for i in flat:
            idx = np.unravel_index(i, a.shape)
            orig = a[idx]
            a[idx] = orig + h
            up = float(fn([Tensor(x) for x in arrs]).data)
            a[idx] = orig - h
            down = float(fn([Tensor(x) for x in arrs]).data)
            a[idx] = orig
            num = (up - down) / (2 * h)
            an = float(analytic[idx])
            rel = abs(an - num) / max(abs(an), abs(num), floor)
            count += 1
            if rel > worst:
                worst, worst_where = rel, f"input {k} index {tuple(int(j) for j in idx)}"
    return GradReport(worst, worst_where, count)
