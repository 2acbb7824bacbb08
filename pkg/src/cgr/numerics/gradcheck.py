"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst: tuple[str, tuple[int, ...]] | None
    tol: float
    n_coords: int
    failures: list[str] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.worst[0]}{list(self.worst[1])}" if self.worst else ""
        msg = f"{status} max_rel_err={self.max_rel_err:.3e} (tol {self.tol:.0e}, {self.n_coords} coords){where}"
        if self.failures:
            msg += "; " + "; ".join(self.failures[:3])
        return msg


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    point: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 1e-8,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare ``backward`` gradients of scalar ``f`` with central differences.

    The relative error per coordinate is ``|a - n| / max(|a| + |n|, atol)``
    (symmetric form, so coordinates where both gradients vanish count as 0).
    ``max_coords`` subsamples coordinates per tensor for large models.
    """
    inputs = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in point.items()}
    out = f(inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        return GradCheckReport(False, float("inf"), None, tol, 0, ["non-finite f at the base point"])
    backward(out)
    analytic = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in inputs.items()
    }

    def evaluate(name: str, arr: np.ndarray) -> float:
        args = {k: Tensor(point[k] if k != name else arr) for k in point}
        return float(f(args).data)

    max_err, worst, n, failures = 0.0, None, 0, []
    for name, base in point.items():
        base = np.array(base, dtype=np.float64)
        flat_idx = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            r = rng if rng is not None else np.random.default_rng(0)
            flat_idx = np.sort(r.choice(base.size, max_coords, replace=False))
        for fi in flat_idx:
            idx = np.unravel_index(fi, base.shape) if base.ndim else ()
            plus, minus = base.copy(), base.copy()
            plus[idx] += eps
            minus[idx] -= eps
            fp, fm = evaluate(name, plus), evaluate(name, minus)
            n += 1
            if not (np.isfinite(fp) and np.isfinite(fm)):
                failures.append(f"non-finite f near {name}{list(idx)}")
                max_err, worst = float("inf"), (name, tuple(int(i) for i in idx))
                continue
            num = (fp - fm) / (2 * eps)
            a = float(analytic[name][idx])
            err = abs(a - num) / max(abs(a) + abs(num), atol)
            if err > max_err:
                max_err, worst = err, (name, tuple(int(i) for i in idx))
    passed = not failures and max_err <= tol
    return GradCheckReport(passed, max_err, worst, tol, n, failures)
