from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from app.diffcore.tensor import Tensor, gradients, no_grad
from app.errors import PrecisionError, ShapeError


@dataclass
class GradCheckReport:
    max_relative_error: Dict[str, float] = field(default_factory=dict)
    checked_entries: Dict[str, int] = field(default_factory=dict)
    threshold: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.threshold

    def failures(self) -> Dict[str, float]:
        return {k: v for k, v in self.max_relative_error.items() if v > self.threshold}


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    threshold: float = 1e-4,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar ``fn()`` with central differences.

    The error per parameter is scale-relative: the largest absolute deviation
    divided by the largest gradient magnitude (floored at 1e-8).  With
    ``max_entries`` only that many randomly chosen entries per parameter are
    perturbed.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise PrecisionError(f"grad_check needs 64-bit parameters; '{name}' is {p.dtype}")

    out = fn()
    if out.data.size != 1:
        raise ShapeError("grad_check", f"function must return a scalar, got shape {out.shape}")
    analytic = gradients(out, params)
    rng = rng or np.random.default_rng(0)

    report = GradCheckReport(threshold=threshold)
    for name, p in params.items():
        size = p.data.size
        if max_entries is not None and size > max_entries:
            indices = rng.choice(size, size=max_entries, replace=False)
        else:
            indices = np.arange(size)
        a = analytic[name].reshape(-1)[indices]
        numeric = np.empty_like(a)
        original = p.data
        for slot, flat in enumerate(indices):
            probe = original.copy().reshape(-1)
            probe[flat] += eps
            p.data = probe.reshape(original.shape)
            with no_grad():
                f_plus = fn().item()
            probe[flat] -= 2 * eps
            p.data = probe.reshape(original.shape)
            with no_grad():
                f_minus = fn().item()
            numeric[slot] = (f_plus - f_minus) / (2 * eps)
        p.data = original
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-8)
        report.max_relative_error[name] = float(np.max(np.abs(a - numeric), initial=0.0) / scale)
        report.checked_entries[name] = int(len(indices))
    return report
