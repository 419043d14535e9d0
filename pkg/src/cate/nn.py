"""Parameter containers and standard layers over :mod:`cate.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Weights uniform in +-1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = _uniform(rng, (n_in, n_out), n_in)
        self.bias = _zeros((n_out,))

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == 1:
            return T.reshape(self(T.reshape(x, (1, -1))), (-1,))
        return T.matmul(x, self.weight) + self.bias


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = Tensor(rng.normal(0.0, std, size=(n, dim)), requires_grad=True)

    def __call__(self, indices) -> Tensor:
        return T.embedding(self.weight, indices)


class LayerNorm(Module):
    """Normalise over the trailing ``len(shape)`` axes; affine over ``affine_shape``."""

    def __init__(self, axes: tuple[int, ...], affine_shape: tuple[int, ...]):
        self.axes = axes
        self.gamma = Tensor(np.ones(affine_shape), requires_grad=True)
        self.beta = Tensor(np.zeros(affine_shape), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.axes) * self.gamma + self.beta


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int | tuple[int, int], rng, stride: int = 1, padding=0):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.stride = stride
        self.padding = padding
        self.weight = _uniform(rng, (c_out, c_in, kh, kw), c_in * kh * kw)
        self.bias = _zeros((c_out, 1, 1))

    def __call__(self, x) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.padding) + self.bias


class Conv3d(Module):
    """Space-time convolution on (N, C, L, H, W) as a sum of per-offset 2D convolutions."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng, stride: int = 1):
        self.kt = kernel
        self.stride = stride
        fan_in = c_in * kernel**3
        self.weight = _uniform(rng, (c_out, c_in, kernel, kernel, kernel), fan_in)
        self.bias = _zeros((c_out, 1, 1))

    def __call__(self, x) -> Tensor:
        n, c, length, h, w = x.shape
        pad = self.kt // 2
        zeros = T.Tensor(np.zeros((n, c, pad, h, w))) if pad else None
        xp = T.concat([zeros, x, zeros], axis=2) if pad else x
        out = None
        for dt in range(self.kt):
            frames = xp[:, :, dt : dt + length]  # (n, c, L, h, w)
            frames = frames.transpose(0, 2, 1, 3, 4).reshape(n * length, c, h, w)
            term = T.conv2d(frames, self.weight[:, :, dt], self.stride, self.kt // 2)
            out = term if out is None else out + term
        return out + self.bias  # (n*L, c_out, h', w')
