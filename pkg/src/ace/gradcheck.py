"""Finite-difference verification of tape gradients.

The checker compares the analytic gradient of a scalar-valued closure against
central differences, coordinate by coordinate, and reports the worst relative
error.  The relative error of a coordinate is

    |analytic - numeric| / max(|analytic|, |numeric|, floor)

where ``floor`` defaults to 1e-3 times the largest analytic gradient
magnitude across all checked parameters: near-zero coordinates are judged
against the gradient's overall scale instead of dividing finite-difference
noise by zero.

Coordinates where the two one-sided difference quotients disagree sharply are
flagged as non-differentiable kinks (e.g. |x| at 0, where the centered
difference and the chosen subgradient both vanish).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckEntry:
    name: str
    flat_index: int
    analytic: float
    numeric: float
    rel_err: float
    kink: bool = False


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: GradCheckEntry | None
    per_param: dict[str, GradCheckEntry] = field(default_factory=dict)
    kinks: list[GradCheckEntry] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def grad_check(build, params, *, step: float = 1e-5, rel_floor: float | None = None) -> GradCheckReport:
    """Compare tape gradients of ``build()`` to central finite differences.

    ``build`` must construct a fresh scalar Tensor from the current values of
    ``params`` (an iterable of (name, Tensor) leaf pairs) on every call, with
    randomness held fixed.  The step is 1e-5 scaled by each coordinate's
    magnitude (unit-scale inputs get 1e-5 exactly).
    """
    params = list(params)
    for _, p in params:
        p.zero_grad()
    out = build()
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check needs a scalar Tensor result")
    f0 = out.item()
    out.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params
    }

    g_scale = max((float(np.max(np.abs(g))) for g in analytic.values() if g.size), default=0.0)
    floor = rel_floor if rel_floor is not None else max(1e-3 * g_scale, 1e-12)

    def value():
        with no_grad():
            return build().item()

    report = GradCheckReport(max_rel_err=0.0, worst=None)
    for name, p in params:
        flat = p.data.reshape(-1)
        gflat = analytic[name].reshape(-1)
        worst_here: GradCheckEntry | None = None
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = gflat[i]
            denom = max(abs(a), abs(numeric), floor)
            rel = abs(a - numeric) / denom
            s_plus = (fp - f0) / h
            s_minus = (f0 - fm) / h
            kink = abs(s_plus - s_minus) > 0.05 * max(1.0, abs(s_plus), abs(s_minus))
            entry = GradCheckEntry(name, i, float(a), float(numeric), float(rel), kink)
            if kink:
                report.kinks.append(entry)
            if worst_here is None or rel > worst_here.rel_err:
                worst_here = entry
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = entry
        if worst_here is not None:
            report.per_param[name] = worst_here
    return report
