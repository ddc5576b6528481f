"""Finite-difference verification of reverse-mode gradients.

Runs in float64: parameter values are temporarily widened, the loss
function is re-evaluated under a float64 constant mode, and analytic
gradients are compared against central differences coordinate by
coordinate. This is the acceptance backbone for every trainable module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Param


@dataclass
class CoordResult:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    ok: bool
    tol: float
    checked: int
    worst: CoordResult | None
    failures: list[CoordResult] = field(default_factory=list)

    def __str__(self):
        lines = [f"grad_check: {'PASS' if self.ok else 'FAIL'} "
                 f"({self.checked} coordinates, tol={self.tol:g})"]
        if self.worst is not None:
            w = self.worst
            lines.append(f"  worst: {w.name}{list(w.index)} "
                         f"analytic={w.analytic:.6e} numeric={w.numeric:.6e} rel_err={w.rel_err:.3e}")
        for f in self.failures:
            lines.append(f"  FAIL {f.name}{list(f.index)} "
                         f"analytic={f.analytic:.6e} numeric={f.numeric:.6e} rel_err={f.rel_err:.3e}")
        return "\n".join(lines)


def grad_check(f, params: list[Param], eps: float = 1e-4, tol: float = 1e-3,
               coords_per_param: int = 16, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of scalar f() against central differences.

    f must be deterministic and close over params; it is re-evaluated
    2 * coords_per_param times per parameter.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    saved = [p.data for p in params]
    saved_trainable = [p.trainable for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
        p.trainable = True
        p.requires_grad = True
        p.grad = None
    try:
        with ad.use_dtype(np.float64):
            loss = f()
            loss.backward()
            analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                        for p in params}
            results = []
            for p in params:
                n = p.data.size
                take = min(coords_per_param, n)
                flat_idx = rng.choice(n, size=take, replace=False)
                for fi in np.sort(flat_idx):
                    index = np.unravel_index(fi, p.data.shape)
                    orig = p.data[index]
                    p.data[index] = orig + eps
                    f_plus = float(f().data)
                    p.data[index] = orig - eps
                    f_minus = float(f().data)
                    p.data[index] = orig
                    numeric = (f_plus - f_minus) / (2 * eps)
                    a = float(analytic[id(p)][index])
                    rel = abs(a - numeric) / max(1.0, abs(numeric))
                    results.append(CoordResult(p.name, tuple(int(i) for i in index),
                                               a, numeric, rel))
    finally:
        for p, data, tr in zip(params, saved, saved_trainable):
            p.data = data
            p.trainable = tr
            p.requires_grad = tr
            p.grad = None
    failures = [r for r in results if r.rel_err > tol]
    worst = max(results, key=lambda r: r.rel_err) if results else None
    return GradCheckReport(ok=not failures, tol=tol, checked=len(results),
                           worst=worst, failures=failures)
