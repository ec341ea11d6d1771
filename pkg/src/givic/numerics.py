"""Tensor substrate: seeded counter-based randomness and finite-difference gradients.

Tensors are plain ``torch.Tensor`` objects. Coding runs use float32, every
gradient/parity verification runs in float64.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch

DEFAULT_DTYPE = torch.float32
CHECK_DTYPE = torch.float64

_MASK64 = (1 << 64) - 1


class EmptyTensorError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


class SeededRng:
    """Counter-based generator keyed by ``(seed, stream)``.

    Draws are reproducible from the key and the draw index alone; there is no
    shared global state. Child streams are derived by hashing the parent key
    with a label, so independent pipeline stages never share a counter.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._bitgen = np.random.Philox(key=self.seed | (self.stream << 64))
        self._gen = np.random.Generator(self._bitgen)
        self.draws = 0

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream}, draws={self.draws})"

    def child(self, label: int | str) -> "SeededRng":
        if isinstance(label, str):
            label = int.from_bytes(label.encode("utf-8")[:8].ljust(8, b"\0"), "little")
        # splitmix64 finaliser keeps derived streams well separated
        z = (self.stream * 0x9E3779B97F4A7C15 + int(label) + 1) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z ^= z >> 31
        return SeededRng(self.seed, z)

    def normal(self, shape: Sequence[int], dtype=DEFAULT_DTYPE) -> torch.Tensor:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise EmptyTensorError(f"cannot draw a tensor with shape {shape}")
        self.draws += 1
        arr = self._gen.standard_normal(shape, dtype=np.float64)
        return torch.from_numpy(arr).to(dtype)

    def uniform(self, shape: Sequence[int], low=0.0, high=1.0, dtype=DEFAULT_DTYPE) -> torch.Tensor:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise EmptyTensorError(f"cannot draw a tensor with shape {shape}")
        self.draws += 1
        arr = self._gen.uniform(low, high, size=shape)
        return torch.from_numpy(arr).to(dtype)

    def integers(self, low: int, high: int, size=None):
        self.draws += 1
        return self._gen.integers(low, high, size=size)

    def torch_generator(self) -> torch.Generator:
        """A torch generator seeded from this stream (for parameter init)."""
        self.draws += 1
        g = torch.Generator()
        g.manual_seed(int(self._gen.integers(0, 2**63 - 1)))
        return g


def sample_gaussian(rng: SeededRng, shape: Sequence[int], dtype=DEFAULT_DTYPE) -> torch.Tensor:
    return rng.normal(shape, dtype=dtype)


def finite_diff_grad(f: Callable[[torch.Tensor], torch.Tensor | float], x: torch.Tensor,
                     delta: float = 1e-4) -> torch.Tensor:
    """Central-difference gradient of a scalar function, evaluated in float64."""
    x = x.detach().to(CHECK_DTYPE).clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + delta
            fp = float(f(x))
            flat[i] = orig - delta
            fm = float(f(x))
            flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise EvaluationError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * delta)
    return grad


def analytic_grad(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Reverse-mode gradient of a scalar function (float64)."""
    x = x.detach().to(CHECK_DTYPE).clone().requires_grad_(True)
    y = f(x)
    (g,) = torch.autograd.grad(y, x)
    return g


def grad_rel_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-5) -> float:
    """Norm-wise relative error.

    The denominator is floored at ``floor``: central differences carry an
    O(delta^2) truncation error, so a gradient smaller than that is zero
    as far as the check can tell.
    """
    diff = (analytic - numeric).norm().item()
    scale = max(analytic.norm().item(), numeric.norm().item(), floor)
    return diff / scale


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise EvaluationError(f"{what} contains non-finite values")
    return t


def ceil_div(n: float, f: float) -> int:
    """``ceil(n / f)`` robust to float error in geometric factors."""
    q = n / f
    r = round(q)
    if abs(q - r) < 1e-9:
        return int(r)
    return int(math.ceil(q))
