"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_input: int
    worst_index: tuple
    n_checked: int


def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-3,
                      tol: float = 1e-3, max_entries: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare ``fn``'s backward pass against central differences.

    ``fn`` maps the input tensors to a scalar tensor. Inputs are promoted to
    float64 in place before checking. With ``max_entries`` set, only that many
    randomly chosen entries per input are perturbed.

    Relative error per entry is ``|a - f| / max(|a|, |f|, 1e-8)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in inputs:
        t.data = t.data.astype(np.float64)
        t.grad = None
        t.requires_grad = True
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = (0.0, 0, ())
    n = 0
    for k, t in enumerate(inputs):
        flat_idx = np.arange(t.data.size)
        if max_entries is not None and t.data.size > max_entries:
            flat_idx = rng.choice(t.data.size, size=max_entries, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), t.data.shape)
            orig = t.data[idx]
            t.data[idx] = orig + h
            fp = float(fn(*inputs).data)
            t.data[idx] = orig - h
            fm = float(fn(*inputs).data)
            t.data[idx] = orig
            fd = (fp - fm) / (2 * h)
            a = float(analytic[k][idx])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            n += 1
            if err > worst[0]:
                worst = (err, k, idx)
    return GradCheckReport(worst[0] < tol, worst[0], worst[1], worst[2], n)
