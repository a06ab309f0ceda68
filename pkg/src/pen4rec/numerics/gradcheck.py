from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .params import ModelParams
from .tensor import Tape, Tensor, no_grad


class NumericalInstabilityError(ArithmeticError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    n_checked: int


def _as_float(loss) -> float:
    value = loss.data if isinstance(loss, Tensor) else np.asarray(loss)
    if value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {value.shape}")
    return float(value.reshape(-1)[0])


def grad_check_report(
    loss_fn: Callable[[], Tensor],
    params: ModelParams,
    eps: float = 1e-5,
    names: list[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients with central differences on every parameter entry.

    The error per entry is ``|a - f| / max(1, |a|, |f|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    worst, worst_name, worst_idx, n = 0.0, None, None, 0
    for p in params:
        if names is not None and p.name not in names:
            continue
        analytic = tape.grad(p)
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            with no_grad():
                flat[j] = orig + eps
                up = _as_float(loss_fn())
                flat[j] = orig - eps
                down = _as_float(loss_fn())
            flat[j] = orig
            idx = np.unravel_index(j, p.data.shape)
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalInstabilityError(
                    f"non-finite loss when perturbing {p.name}{list(map(int, idx))}"
                )
            fd = (up - down) / (2.0 * eps)
            a = float(analytic.reshape(-1)[j])
            err = abs(a - fd) / max(1.0, abs(a), abs(fd))
            n += 1
            if err > worst:
                worst, worst_name, worst_idx = err, p.name, tuple(int(i) for i in idx)
    return GradCheckReport(worst, worst_name, worst_idx, n)


def grad_check(loss_fn: Callable[[], Tensor], params: ModelParams, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central finite-difference gradients."""
    return grad_check_report(loss_fn, params, eps).max_rel_error
