"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, no_grad


class NonDeterministicError(RuntimeError):
    """The checked function returned different values for identical inputs."""


def _evaluate(f, inputs) -> float:
    with no_grad():
        out = f(*inputs)
    value = out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)
    if value.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {value.shape}")
    return float(value.reshape(-1)[0])


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Return the worst per-coordinate relative error between the tape's
    gradient and central finite differences.

    ``relative = |analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    Every input with ``requires_grad`` is perturbed coordinate by coordinate.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    inputs = list(inputs)
    base = _evaluate(f, inputs)
    if _evaluate(f, inputs) != base:
        raise NonDeterministicError("function value changed between identical evaluations")

    for t in inputs:
        t.grad = None
    out = f(*inputs)
    out.backward()

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = _evaluate(f, inputs)
            flat[i] = orig - epsilon
            down = _evaluate(f, inputs)
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
