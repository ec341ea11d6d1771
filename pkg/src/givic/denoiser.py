"""Per-token noise predictor with rotary position embedding, and the reverse step."""

from __future__ import annotations

import math
from typing import Callable, List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tokenizer as tk
from .pyramid import PyramidConfig, resize
from .tokenizer import TokenGeometry, TokenRef


class ContractError(ValueError):
    pass


def _bands(h: int) -> int:
    if h % 8:
        raise ValueError("rotary embedding needs h divisible by 8")
    return h // 8


def embed_position(t: float | torch.Tensor, pos: torch.Tensor, h: int) -> torch.Tensor:
    """Rotary phases (n, h/2) for (frame, row, col) in [0,1]^3 and diffusion time t.

    Quarter q of the feature pairs rotates with coordinate q of
    (frame, row, col, t); band j inside a quarter uses frequency pi * 2^j.
    """
    nb = _bands(h)
    n = pos.shape[0]
    t = torch.as_tensor(t, dtype=pos.dtype).expand(n).reshape(n, 1)
    coords = torch.cat([pos, t], 1)
    freqs = math.pi * (2.0 ** torch.arange(nb, dtype=pos.dtype))
    return (coords[:, :, None] * freqs[None, None, :]).reshape(n, 4 * nb)


def rotate(x: torch.Tensor, phase: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive feature pairs of x (n, h) by ``phase`` (n, h/2)."""
    n, h = x.shape
    xr = x.reshape(n, h // 2, 2)
    c, s = torch.cos(phase).to(x.dtype), torch.sin(phase).to(x.dtype)
    a, b = xr[..., 0], xr[..., 1]
    return torch.stack([a * c - b * s, a * s + b * c], -1).reshape(n, h)


class PosEmbed(nn.Module):
    """gamma(t, pos): a learned base vector rotated by the rotary phases."""

    def __init__(self, h: int):
        super().__init__()
        _bands(h)
        self.base = nn.Parameter(torch.randn(h) / math.sqrt(h))

    def forward(self, t, pos):
        h = self.base.shape[0]
        phase = embed_position(t, pos.to(self.base.dtype), h)
        return rotate(self.base.expand(pos.shape[0], -1), phase)


class Denoiser(nn.Module):
    """L hidden layers plus a head mapping to token pixels.

    The flattened noisy token and its latent features enter the first layer;
    the conditioning z + gamma(t, pos) is added to the first hidden activation.
    """

    def __init__(self, geometry: TokenGeometry, latent_dim: int, h: int, width: int = 64, L: int = 4):
        super().__init__()
        if L < 1:
            raise ValueError("L must be >= 1")
        self.geometry = geometry
        self.token_size = geometry.size
        self.latent_dim = latent_dim
        self.inp = nn.Linear(self.token_size + latent_dim, width)
        self.cond = nn.Linear(h, width)
        self.hidden = nn.ModuleList(nn.Linear(width, width) for _ in range(L - 1))
        self.head = nn.Linear(width, self.token_size)
        self.pos = PosEmbed(h)
        with torch.no_grad():
            self.head.weight.mul_(0.1)

    def forward(self, noisy, z, t, pos, feats, beta: float = 1.0):
        """Noise estimate for flattened tokens; the head output is scaled by 1/beta."""
        if z is None or feats is None:
            raise ContractError("denoiser needs both the HGLA conditioning and latent features")
        c = z + self.pos(t, pos)
        a = F.gelu(self.inp(torch.cat([noisy, feats], -1)) + self.cond(c))
        for lin in self.hidden:
            a = a + F.gelu(lin(a))
        out = self.head(a)
        return out if beta == 1.0 else out / beta


def predict_noise(model: Denoiser, noisy_token, z, t, pos, feats, beta: float = 1.0):
    return model(noisy_token, z, t, pos, feats, beta)


def normalized_origin(refs: Sequence[TokenRef], extents) -> torch.Tensor:
    e = torch.tensor([max(n, 1) for n in extents], dtype=torch.float64)
    o = torch.tensor([r.pos for r in refs], dtype=torch.float64).reshape(-1, 3)
    return (o / e).clamp(0, 1)


def normalized_center(refs: Sequence[TokenRef], extents, geometry: TokenGeometry) -> torch.Tensor:
    """Token centres in align-corners coordinates of a canvas with ``extents``."""
    o = torch.tensor([r.pos for r in refs], dtype=torch.float64).reshape(-1, 3)
    half = torch.tensor([(geometry.r_t - 1) / 2, (geometry.r_h - 1) / 2, (geometry.r_w - 1) / 2],
                        dtype=torch.float64)
    span = torch.tensor([max(n - 1, 1) for n in extents], dtype=torch.float64)
    c = torch.minimum(o + half, torch.tensor([n - 1 for n in extents], dtype=torch.float64))
    return (c / span).clamp(0, 1)


class NullConditioning:
    """Conditioning provider that feeds zero z vectors (no HGLA)."""

    def __init__(self, h: int, dtype=torch.float32):
        self.h, self.dtype = h, dtype

    def begin_scale(self, k, steps):
        pass

    def query(self, step, noisy):
        return torch.zeros(noisy.shape[0], self.h, dtype=noisy.dtype)

    def commit(self, step, denoised):
        pass

    def end_scale(self):
        pass


def reverse_step(canvas: torch.Tensor, k: int, K: int, steps: List[tk.Step],
                 denoise: Callable, conditioning, pyramid: PyramidConfig,
                 geometry: TokenGeometry, out_extents) -> torch.Tensor:
    """x^{k-1} = US(x^k) - beta_inc^k * eps^k, token by token in schedule order.

    ``denoise(noisy_tokens, z, k, K, refs, extents)`` returns the per-token
    noise estimate; ``conditioning`` supplies z for each step and absorbs the
    denoised tokens afterwards.
    """
    up = resize(canvas, out_extents)
    padded = tk.pad_to_tokens(up, geometry)
    beta = pyramid.beta_increment(k, K)
    conditioning.begin_scale(k, steps)
    idx_all, vals = [], []
    for st in steps:
        if not st.tokens:
            conditioning.query(st, padded.new_zeros(0, geometry.size))
            conditioning.commit(st, padded.new_zeros(0, geometry.size))
            continue
        idx = tk.token_index(st.tokens, padded.shape, geometry)
        noisy = tk.gather_tokens(padded, idx)
        z = conditioning.query(st, noisy)
        eps = denoise(noisy, z, k, K, st.tokens, out_extents)
        den = noisy - beta * eps if beta != 0 else noisy
        conditioning.commit(st, den)
        idx_all.append(idx.reshape(-1))
        vals.append(den.reshape(-1))
    conditioning.end_scale()
    if not idx_all:
        return up
    flat = padded.reshape(-1).index_copy(0, torch.cat(idx_all), torch.cat(vals))
    out = flat.view(padded.shape)
    T, H, W = out_extents
    return out[:T, :H, :W]
