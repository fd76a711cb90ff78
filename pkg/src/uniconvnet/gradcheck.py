"""Central finite-difference checks of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Rng, Tape, Tensor, backward

KINK_RADIUS = 1e-3


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    tol: float

    def __bool__(self) -> bool:
        return self.passed


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(
    op_under_test: Callable[..., Tensor],
    input_shapes: Sequence[Sequence[int]],
    rng: Rng,
    eps: float = 1e-4,
    tol: float = 1e-5,
    *,
    inputs: Sequence[np.ndarray] | None = None,
    max_entries: int | None = None,
    avoid_kink: bool = False,
) -> GradCheckReport:
    """Compare tape gradients of ``op_under_test`` against central differences.

    The scalar probed is <s, op(*inputs)> for a random direction ``s``.
    Inputs are standard-normal samples of ``input_shapes`` unless ``inputs``
    is given.  ``max_entries`` limits the check to that many randomly chosen
    coordinates per input; ``avoid_kink`` resamples entries with
    |x| < 1e-3.  Everything runs in float64.
    """
    if inputs is None:
        arrays = []
        for shape in input_shapes:
            a = rng.normal(tuple(shape))
            if avoid_kink:
                near = np.abs(a) < KINK_RADIUS
                while near.any():
                    a[near] = rng.normal(int(near.sum()))
                    near = np.abs(a) < KINK_RADIUS
            arrays.append(a)
    else:
        arrays = [np.array(a, dtype=np.float64) for a in inputs]

    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = op_under_test(*leaves)
    direction = rng.normal(out.shape)
    grads = backward(tape, out, direction)

    def probe(args: list[np.ndarray]) -> float:
        return float(np.sum(direction * op_under_test(*[Tensor(a) for a in args]).data))

    worst = 0.0
    checked = 0
    for k, a in enumerate(arrays):
        analytic = grads[leaves[k].id]
        idx = np.arange(a.size)
        if max_entries is not None and a.size > max_entries:
            idx = np.sort(rng.integers(0, a.size, size=max_entries))
        trial = list(arrays)
        trial[k] = a.copy()
        for flat in idx:
            trial[k].flat[flat] = a.flat[flat] + eps
            up = probe(trial)
            trial[k].flat[flat] = a.flat[flat] - eps
            down = probe(trial)
            trial[k].flat[flat] = a.flat[flat]
            numeric = (up - down) / (2 * eps)
            worst = max(worst, float(relative_error(analytic.flat[flat], numeric)))
            checked += 1
    return GradCheckReport(max_rel_err=worst, passed=worst <= tol, checked=checked, tol=tol)
