from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor, backward, zero_grads


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    n_checked: int

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_err <= tolerance


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tolerance: float | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` is re-evaluated with each coordinate of each parameter nudged by
    ``+-step``. With ``max_coords`` set, a random subset of that many
    coordinates per parameter is probed instead of all of them.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters; {name} is {p.dtype}")
    zero_grads(params.values())
    loss = f()
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    zero_grads(params.values())

    worst, worst_name, worst_idx, checked = 0.0, None, None, 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        grad_flat = analytic[name].reshape(-1)
        for i in coords:
            original = flat[i]
            flat[i] = original + step
            up = float(f().data)
            flat[i] = original - step
            down = float(f().data)
            flat[i] = original
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"non-finite objective while probing {name}")
            err = relative_error(float(grad_flat[i]), (up - down) / (2.0 * step))
            checked += 1
            if err > worst:
                worst, worst_name = err, name
                worst_idx = tuple(int(j) for j in np.unravel_index(i, p.shape))
    report = GradCheckReport(worst, worst_name, worst_idx, checked)
    if tolerance is not None and not report.passed(tolerance):
        raise AssertionError(f"gradient check failed: rel err {worst:.3e} at {worst_name}{worst_idx}")
    return report
