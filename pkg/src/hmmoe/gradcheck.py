"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DeterminismError
from .params import ParameterStore
from .tensor import Tape, Tensor

REL_FLOOR = 1e-8


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; zero when both vanish."""
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    worst_param: str | None = None
    worst_index: tuple[int, ...] | None = None
    worst_analytic: float = 0.0
    worst_numeric: float = 0.0
    entries_checked: int = 0
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _scalar(f: Callable[[ParameterStore], Tensor], store: ParameterStore) -> float:
    out = f(store)
    return out.item() if isinstance(out, Tensor) else float(out)


def finite_difference_check(
    f: Callable[[ParameterStore], Tensor],
    store: ParameterStore,
    step: float = 1e-5,
    names: list[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f(store)`` against central differences.

    Every scalar entry of every trainable parameter (or of ``names``) is
    perturbed by ``±step``. Raises :class:`DeterminismError` if two plain
    evaluations of ``f`` disagree.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = _scalar(f, store)
    if _scalar(f, store) != base:
        raise DeterminismError("f returned different values for identical parameters")

    params = store.trainable()
    with Tape() as tape:
        loss = f(store)
    tape.backward(loss, params)

    report = GradCheckReport()
    targets = names if names is not None else [n for n, _ in store.trainable_items()]
    for name in targets:
        t = store[name]
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = 0.0
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)  # a view, so writes perturb the parameter
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _scalar(f, store)
            flat[i] = orig - step
            down = _scalar(f, store)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(analytic.reshape(-1)[i])
            err = relative_error(a, numeric)
            report.entries_checked += 1
            worst = max(worst, err)
            if report.worst_param is None or err > report.max_rel_error:
                report.max_rel_error = err
                report.worst_param = name
                report.worst_index = tuple(int(v) for v in np.unravel_index(i, t.shape))
                report.worst_analytic = a
                report.worst_numeric = numeric
        report.per_param[name] = worst
    return report
