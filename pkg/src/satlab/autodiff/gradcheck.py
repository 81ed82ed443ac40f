"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from satlab.autodiff.tensor import Tensor, Trace, no_trace


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_coordinate: Optional[tuple]  # (param name, flat index)
    n_checked: int
    per_param: dict = field(default_factory=dict)  # name -> max rel err
    entries: list = field(default_factory=list)  # (name, index, analytic, numeric, rel_err)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def sample_coordinates(
    params: Mapping[str, Tensor],
    sample: int,
    seed: int,
    required: Iterable[str] = (),
    min_per_param: int = 1,
) -> list[tuple[str, int]]:
    """Pick coordinates to check.

    Every coordinate of the ``required`` parameters is included, each other
    parameter contributes at least ``min_per_param`` coordinates, and the
    rest of the budget is drawn uniformly over all remaining coordinates.
    """
    rng = np.random.default_rng(seed)
    required = sorted(set(required))
    chosen: dict[tuple[str, int], None] = {}
    for name in required:
        for i in range(params[name].size):
            chosen[(name, i)] = None
    for name, p in params.items():
        if name in required:
            continue
        k = min(min_per_param, p.size)
        for i in rng.choice(p.size, size=k, replace=False):
            chosen[(name, int(i))] = None
    pool = [(n, p.size) for n, p in params.items() if n not in required]
    total = sum(s for _, s in pool)
    if total:
        weights = np.array([s for _, s in pool], dtype=np.float64) / total
        guard = 0
        while len(chosen) < sample and guard < 50 * sample:
            guard += 1
            j = rng.choice(len(pool), p=weights)
            name, size = pool[j]
            chosen[(name, int(rng.integers(size)))] = None
    return list(chosen)


def grad_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    sample: int = 200,
    seed: int = 0,
    required: Iterable[str] = (),
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` must return a scalar tensor and depend on the
    parameters only through their ``.data``. Parameters must be float64.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters; {name} is {p.dtype}")
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None

    tape = Trace()
    with tape:
        loss = loss_fn(params)
    tape.backward(loss)
    analytic = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}

    report = GradCheckReport(max_rel_err=0.0, worst_coordinate=None, n_checked=0)
    with no_trace():
        for name, i in sample_coordinates(params, sample, seed, required):
            flat = params[name].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn(params).data)
            flat[i] = orig - eps
            f_minus = float(loss_fn(params).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(analytic[name].reshape(-1)[i])
            err = rel_err(a, numeric)
            report.entries.append((name, i, a, numeric, err))
            report.per_param[name] = max(report.per_param.get(name, 0.0), err)
            report.n_checked += 1
            if report.worst_coordinate is None or err > report.max_rel_err:
                report.max_rel_err = err
                report.worst_coordinate = (name, i)
    return report
