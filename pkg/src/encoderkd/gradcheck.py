"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonDeterministicFunction
from .tensor import Tensor, no_grad


@dataclass
class CheckReport:
    errors: list[float] = field(default_factory=list)
    names: list[str] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def worst(self) -> str:
        if not self.errors:
            return ""
        return self.names[int(np.argmax(self.errors))]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude.

    ``floor`` keeps finite-difference round-off on all-zero gradients from
    registering as a relative error.
    """
    if analytic.size == 0:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> CheckReport:
    """Compare backprop gradients of the scalar ``f()`` with central differences.

    ``f`` takes no arguments and must read the ``inputs`` tensors, which are
    perturbed in place. When ``max_entries`` is set, only that many randomly
    chosen coordinates per input are differenced.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(seed)

    for x in inputs:
        x.grad = None
    loss = f()
    with no_grad():
        again = f().item()
    if loss.item() != again:
        raise NonDeterministicFunction(f"two forward passes disagree: {loss.item()!r} vs {again!r}")
    loss.backward()

    report = CheckReport(tol=tol)
    for i, x in enumerate(inputs):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(len(coords))
        with no_grad():
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + step
                up = f().item()
                flat[c] = orig - step
                down = f().item()
                flat[c] = orig
                numeric[j] = (up - down) / (2.0 * step)
        report.errors.append(relative_error(analytic.reshape(-1)[coords], numeric))
        report.names.append(names[i] if names is not None else (x.name or f"input{i}"))
    for x in inputs:
        x.grad = None
    return report
