"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)   # name -> max relative error
    failures: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_error < self.tolerance

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        worst = max(self.errors, key=self.errors.get, default="-")
        return f"gradcheck {status}: max rel err {self.max_error:.2e} ({worst}) {self.failures or ''}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: Optional[float] = None) -> float:
    """Elementwise relative error with a floor at 1e-3 of the gradient scale.

    ``scale`` defaults to the largest entry of the two arrays; pass the
    scale of the whole gradient so near-zero tensors are judged against it.
    """
    if scale is None:
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(1e-3 * scale, 1e-10))
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def finite_difference_check(build: Callable[[], Tensor], inputs: Sequence[Tensor],
                            rel_tolerance: float = 1e-4, names: Optional[Sequence[str]] = None,
                            max_elements: Optional[int] = None, seed: int = 0,
                            step: float = 1e-5) -> GradCheckReport:
    """Compare backward() against central differences for every tensor in ``inputs``.

    ``build`` must recompute the scalar loss from the current input values.
    Step size is ``step * max(1, |x|)`` per element; a smaller step lowers the
    chance that a perturbation crosses a ReLU or max-pool kink.  ``max_elements`` samples a
    subset of entries per input for large models.  Non-finite values are
    reported as failures rather than raised.
    """
    report = GradCheckReport(tolerance=rel_tolerance)
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    for t in inputs:
        t.grad = None
    loss = build()
    backward(loss, inputs)
    analytic = [t.grad.copy() for t in inputs]
    scale = max((float(np.abs(g).max(initial=0.0)) for g in analytic), default=0.0)
    rng = np.random.default_rng(seed)
    for name, t, ga in zip(names, inputs, analytic):
        if not np.all(np.isfinite(ga)):
            report.failures.append(f"{name}: non-finite analytic gradient")
            continue
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        num = np.zeros(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            h = step * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            fp = float(build().data)
            flat[i] = orig - h
            fm = float(build().data)
            flat[i] = orig
            num[k] = (fp - fm) / (2 * h)
        if not np.all(np.isfinite(num)):
            report.failures.append(f"{name}: non-finite numeric gradient")
            continue
        report.errors[name] = relative_error(ga.reshape(-1)[idx], num, scale)
    return report
