"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tape, Tensor


class GradCheckError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"evaluation failed at perturbed coordinate {index}: {cause}")
        self.index = index
        self.cause = cause


@dataclass
class CheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float
    worst_index: tuple[int, ...]
    rel_tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.rel_tol


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    rel_tol: float = 1e-4,
) -> CheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` against central differences.

    The relative error of each coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    x = np.array(x, dtype=np.float64)

    tape = Tape()
    leaf = tape.leaf(x)
    out = f(leaf)
    if out.tape is tape:
        analytic = tape.backward(out)[leaf.node]
    else:
        # the output never touched the input
        analytic = np.zeros_like(x)

    numeric = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        values = []
        for sign in (1.0, -1.0):
            xp = x.copy()
            xp[index] += sign * eps
            try:
                values.append(f(Tensor(xp)).item())
            except Exception as exc:
                raise GradCheckError(index, exc) from exc
        numeric[index] = (values[0] - values[1]) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    if rel.size:
        worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
        max_rel = float(rel[worst])
    else:
        worst, max_rel = (), 0.0
    return CheckReport(analytic, numeric, max_rel, tuple(int(i) for i in worst), rel_tol)
