"""Hierarchical latent grids: encoder initialisation, probing and quantisation relaxations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn

from .numerics import SeededRng, ceil_div
from .pyramid import downsample

Q_MIN, Q_MAX = -128, 127


@dataclass(frozen=True)
class LatentConfig:
    dims: Tuple[int, ...] = (2, 2, 2)  # D^l per level, finest first
    t_stride: int = 2  # level l temporal stride t_stride^l
    s_stride: int = 4  # level l spatial stride s_stride * 2^l

    @property
    def levels(self) -> int:
        return len(self.dims)

    @property
    def total_dim(self) -> int:
        return sum(self.dims)

    def strides(self, level: int) -> Tuple[int, int]:
        return self.t_stride ** level, self.s_stride * 2 ** level

    def shapes(self, T: int, H: int, W: int) -> List[Tuple[int, int, int, int]]:
        out = []
        for l, d in enumerate(self.dims):
            st, ss = self.strides(l)
            shape = (ceil_div(T, st), ceil_div(H, ss), ceil_div(W, ss), d)
            if min(shape) < 1:
                raise ValueError(f"latent level {l} has a zero extent")
            out.append(shape)
        return out


class LatentEncoder(nn.Module):
    """Strided mean-pool pyramid followed by a per-level linear channel projection."""

    def __init__(self, cfg: LatentConfig, init_scale: float = 6.0):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.ModuleList(nn.Linear(3, d) for d in cfg.dims)
        # start with latents spread over several quantisation bins, centred on mid-grey
        with torch.no_grad():
            for lin in self.proj:
                nn.init.normal_(lin.weight, std=init_scale)
                lin.bias.copy_(-0.5 * lin.weight.sum(1))

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        grids = []
        for l, lin in enumerate(self.proj):
            pooled = downsample(x, self.cfg.strides(l))
            grids.append(lin(pooled))
        return grids


def encode_latents(x: torch.Tensor, encoder: LatentEncoder) -> List[torch.Tensor]:
    return encoder(x)


def _probe_level(grid: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    S = grid.shape[:3]
    idx0, w = [], []
    for a in range(3):
        c = pos[:, a].to(grid.dtype) * (S[a] - 1)
        f = torch.clamp(torch.floor(c.detach()), 0, max(S[a] - 2, 0)).long()
        idx0.append(f)
        w.append(c - f.to(grid.dtype) if S[a] > 1 else torch.zeros_like(c))
    out = 0
    for dt in (0, 1):
        for dh in (0, 1):
            for dw in (0, 1):
                it = torch.clamp(idx0[0] + dt, max=S[0] - 1)
                ih = torch.clamp(idx0[1] + dh, max=S[1] - 1)
                iw = torch.clamp(idx0[2] + dw, max=S[2] - 1)
                wt = w[0] if dt else 1 - w[0]
                wh = w[1] if dh else 1 - w[1]
                ww = w[2] if dw else 1 - w[2]
                out = out + (wt * wh * ww)[:, None] * grid[it, ih, iw]
    return out


def probe(grids: Sequence[torch.Tensor], pos: torch.Tensor) -> torch.Tensor:
    """Align-corners trilinear interpolation of every level at ``pos`` (n, 3) in [0,1]^3."""
    if pos.shape[0] == 0:
        return grids[0].new_zeros(0, sum(g.shape[-1] for g in grids))
    return torch.cat([_probe_level(g, pos) for g in grids], -1)


def quantize(y: torch.Tensor):
    """Round to nearest (ties to even) and clamp to the signed 8-bit alphabet.

    Returns ``(q, overflow)`` where ``overflow`` tells whether clamping occurred.
    """
    r = torch.round(y)
    overflow = bool(((r < Q_MIN) | (r > Q_MAX)).any())
    return r.clamp(Q_MIN, Q_MAX), overflow


def relax_uniform(y: torch.Tensor, rng: SeededRng) -> torch.Tensor:
    return y + rng.uniform(y.shape, -0.5, 0.5, dtype=y.dtype)


def soft_round(y: torch.Tensor, alpha: float) -> torch.Tensor:
    if not alpha > 0:
        raise ValueError("soft-round temperature must be positive")
    m = torch.floor(y) + 0.5
    r = y - m
    return m + 0.5 * torch.tanh(alpha * r) / math.tanh(alpha / 2)


def kumaraswamy_b(a: float) -> float:
    return ((a - 1) * 2 ** a + 1) / a


def kumaraswamy_noise(shape, a: float, rng: SeededRng, dtype=torch.float32) -> torch.Tensor:
    """Inverse-CDF sample of Kum(a, b) shifted to [-1/2, 1/2]; b puts the mode at 1/2."""
    if a < 1:
        raise ValueError("Kumaraswamy shape a must be >= 1")
    b = kumaraswamy_b(a)
    u = rng.uniform(shape, 0.0, 1.0, dtype=torch.float64)
    x = (1 - (1 - u) ** (1 / b)) ** (1 / a)
    return (x - 0.5).to(dtype)


@dataclass(frozen=True)
class AnnealSchedule:
    steps: int
    alpha_sr: Tuple[float, float] = (1.0, 8.0)
    kumaraswamy_a: Tuple[float, float] = (1.0, 2.0)

    def _lerp(self, ends, step):
        if self.steps <= 1:
            return ends[1]
        f = min(max(step / (self.steps - 1), 0.0), 1.0)
        return ends[0] + f * (ends[1] - ends[0])

    def at(self, step: int) -> Tuple[float, float]:
        return self._lerp(self.alpha_sr, step), self._lerp(self.kumaraswamy_a, step)


def encode_relaxation(y: torch.Tensor, alpha: float, a: float, rng: SeededRng):
    """(rate input, distortion input) for encode-time optimisation.

    The rate sees s(y) + u; the decoder sees s(s(y) + u).
    """
    noisy = soft_round(y, alpha) + kumaraswamy_noise(y.shape, a, rng, y.dtype)
    return noisy, soft_round(noisy, alpha)
