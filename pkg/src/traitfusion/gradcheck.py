"""Finite-difference gradient oracle.

Central differences (f(x+h) - f(x-h)) / 2h against analytic backward, per
parameter element, reported as a max relative error per parameter group.
The comparison stays independent of the backward implementation it checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ParamTensor, Tensor

__all__ = [
    "GradCheckError", "NondeterministicFunction", "GradCheckReport",
    "grad_check", "jitter_params",
]


class GradCheckError(ValueError):
    pass


class NondeterministicFunction(GradCheckError):
    """The function under check returned different values on repeated calls."""


@dataclass
class GradCheckReport:
    tol: float
    h: float
    max_rel_err: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.max_rel_err.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return name, self.max_rel_err[name]

    def __str__(self) -> str:
        lines = [
            f"{'PASS' if v <= self.tol else 'FAIL'}  {name:<40s} max rel err {v:.3e}"
            for name, v in self.max_rel_err.items()
        ]
        name, v = self.worst
        lines.append(f"worst: {name} ({v:.3e}); tol {self.tol:.1e}, h {self.h:.1e}")
        return "\n".join(lines)


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def jitter_params(params: Sequence[ParamTensor], rng, scale: float = 0.05) -> None:
    """Nudge every parameter by uniform noise so the check runs at a generic
    point. Zero-initialized biases otherwise leave ReLU pre-activations
    exactly on the kink, where one-sided crossings break central differences.
    """
    for p in params:
        p.assign(p.value.array + rng.uniform(-scale, scale, p.value.shape))


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[ParamTensor],
    h: float = 1e-5,
    tol: float = 1e-5,
    scale_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar-valued f against central differences.

    f must be deterministic (run dropout in eval mode or under a fixed mask);
    two probe evaluations that disagree are rejected. Passing means every
    parameter's max relative error is within tol.
    """
    probe1 = f()
    probe2 = f()
    if probe1.size != 1:
        raise GradCheckError(f"grad_check needs a scalar-valued function, got shape {probe1.shape}")
    if probe1.item() != probe2.item():
        raise NondeterministicFunction(
            f"function under check is not deterministic: {probe1.item()!r} != {probe2.item()!r}"
        )

    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = {p.name: np.array(p.value.grad) for p in params}

    report = GradCheckReport(tol=tol, h=h)
    for p in params:
        theta = p.value.array
        worst = 0.0
        flat = theta.reshape(-1)
        ana = analytic[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, _rel_err(float(ana[i]), numeric, scale_floor))
        report.max_rel_err[p.name] = worst
    return report
