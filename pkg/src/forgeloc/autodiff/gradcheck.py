"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import Graph, Tensor


@dataclass
class ParamCheck:
    name: str
    worst_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    n_checked: int
    n_failed: int


@dataclass
class GradCheckReport:
    tol: float
    h: float
    results: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.n_failed == 0 for r in self.results)

    @property
    def failures(self) -> list[ParamCheck]:
        return [r for r in self.results if r.n_failed]

    @property
    def worst(self) -> Optional[ParamCheck]:
        return max(self.results, key=lambda r: r.worst_error, default=None)

    def worst_by_group(self, depth: int = 1) -> dict[str, ParamCheck]:
        """Worst offender per name prefix (first ``depth`` dotted components)."""
        groups: dict[str, ParamCheck] = {}
        for r in self.results:
            key = ".".join(r.name.split(".")[:depth])
            if key not in groups or r.worst_error > groups[key].worst_error:
                groups[key] = r
        return groups


def relative_error(a, n, floor: float):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def analytic_gradients(fn: Callable[[dict], Tensor], params: Mapping[str, np.ndarray]) -> dict:
    graph = Graph()
    leaves = graph.leaves_from(dict(params))
    loss = fn(leaves)
    return graph.backward(loss)


def finite_diff_check(fn: Callable[[dict], Tensor], params: Mapping[str, np.ndarray],
                      h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6,
                      analytic: Optional[Mapping[str, np.ndarray]] = None,
                      names: Optional[list] = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps a dict of tensors (keyed like ``params``) to a scalar tensor.
    It is evaluated once on graph leaves for the analytic gradient, then on
    graph-free constants for every perturbation ``(f(p+h) - f(p-h)) / 2h``.
    An entry fails when ``|a - n| / max(|a|, |n|, floor)`` exceeds ``tol``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if analytic is None:
        analytic = analytic_gradients(fn, params)
    report = GradCheckReport(tol=tol, h=h)

    def evaluate() -> float:
        return float(fn({k: Tensor(v) for k, v in params.items()}).data)

    for name in names or list(params):
        p = params[name]
        flat = p.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            num[i] = (up - down) / (2.0 * h)
        ana = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        err = relative_error(ana, num, floor)
        j = int(np.argmax(err)) if err.size else 0
        report.results.append(ParamCheck(
            name=name,
            worst_error=float(err[j]) if err.size else 0.0,
            worst_index=tuple(int(v) for v in np.unravel_index(j, p.shape)) if err.size else (),
            analytic=float(ana[j]) if err.size else 0.0,
            numeric=float(num[j]) if err.size else 0.0,
            n_checked=int(flat.size),
            n_failed=int(np.sum(err > tol)),
        ))
    return report
