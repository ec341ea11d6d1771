"""Discretised-Gaussian PMFs, the hierarchical context model and latent entropy coding."""

from __future__ import annotations

import hashlib
import math
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import ndtr as np_ndtr

from .hgla import HGLA, HglaRunner, ScaleStream, forward_chunked
from .latents import Q_MAX, Q_MIN, LatentConfig, probe
from .rangecoder import RangeDecoder, RangeEncoder, TOTAL, cdf_from_freq, quantize_pmf
from .tokenizer import lattice_steps

SIGMA_MIN = 0.01
ALPHABET = Q_MAX - Q_MIN + 1
LIKELIHOOD_FLOOR = 1e-9


class CausalityError(RuntimeError):
    pass


def _floor_sigma(sigma):
    if isinstance(sigma, torch.Tensor):
        return sigma.clamp(min=SIGMA_MIN)
    return max(float(sigma), SIGMA_MIN)


def likelihood(y: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Probability of the unit bin around y; bins at the alphabet edges absorb the tails.

    Works for real-valued (relaxed) y as well, which keeps it differentiable.
    """
    y, mu, sigma = torch.broadcast_tensors(*(torch.as_tensor(a, dtype=torch.float64) if not isinstance(a, torch.Tensor)
                                             else a for a in (y, mu, sigma)))
    sigma = _floor_sigma(sigma)
    lo = (y - 0.5 - mu) / sigma
    hi = (y + 0.5 - mu) / sigma
    # evaluate in the tail where the difference is numerically stable
    upper = y > mu
    p_left = torch.special.ndtr(hi) - torch.special.ndtr(lo)
    p_right = torch.special.ndtr(-lo) - torch.special.ndtr(-hi)
    p = torch.where(upper, p_right, p_left)
    p = torch.where(y >= Q_MAX, torch.special.ndtr(-lo), p)
    p = torch.where(y <= Q_MIN, torch.special.ndtr(hi), p)
    return p


def pmf(v, mu, sigma) -> float:
    """P(v) for integer v under the discretised Gaussian (mu, sigma)."""
    p = likelihood(torch.tensor(float(v), dtype=torch.float64), torch.tensor(float(mu), dtype=torch.float64),
                   torch.tensor(float(sigma), dtype=torch.float64))
    return float(p)


def bits(y: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Total -log2 likelihood."""
    return -torch.log2(likelihood(y, mu, sigma).clamp(min=LIKELIHOOD_FLOOR)).sum()


def pmf_table(mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """(n, 256) probabilities over the alphabet for each (mu, sigma)."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 1)
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64).reshape(-1, 1), SIGMA_MIN)
    edges = np.arange(Q_MIN, Q_MAX, dtype=np.float64) + 0.5  # 255 inner boundaries
    z = (edges[None, :] - mu) / sigma
    # cdf via the upper tail above the mean to keep precision symmetric
    c = np.where(z > 0, 1.0 - np_ndtr(-z), np_ndtr(z))
    c = np.concatenate([np.zeros((mu.shape[0], 1)), c, np.ones((mu.shape[0], 1))], 1)
    p = np.diff(c, axis=1)
    p = np.maximum(p, 0.0)
    return p / p.sum(1, keepdims=True)


def freq_table(mu: torch.Tensor, sigma: torch.Tensor) -> np.ndarray:
    return quantize_pmf(pmf_table(mu.detach().double().numpy(), sigma.detach().double().numpy()))


# -- coding order ------------------------------------------------------------------

def level_plan(shape) -> List[tuple]:
    """Steps (key, cells) for one latent lattice ``(S_t, S_h, S_w, D)``."""
    S_t, S_h, S_w = shape[:3]
    return [((lev, d), cells) for lev, d, cells in lattice_steps(S_t, S_h, S_w)]


def cell_positions(cells, shape, dtype=torch.float64) -> torch.Tensor:
    if not cells:
        return torch.zeros(0, 3, dtype=dtype)
    span = torch.tensor([max(n - 1, 1) for n in shape[:3]], dtype=dtype)
    return torch.tensor(cells, dtype=dtype) / span


def _flat_index(cells, shape) -> torch.Tensor:
    _, H, W = shape[:3]
    return torch.tensor([(i * H + u) * W + v for i, u, v in cells], dtype=torch.long)


# -- models ------------------------------------------------------------------------

class ContextModel(nn.Module):
    """Per-level (mu, sigma) predictor driven by an HGLA over the latent coding order.

    Levels are coded coarsest first; each level is one HGLA scale whose
    carrier states come from the previous (coarser) level.
    """

    def __init__(self, cfg: LatentConfig, h: int = 16, M: int = 4, carrier: str = "verbatim"):
        super().__init__()
        self.cfg = cfg
        self.hgla = HGLA(h, M, carrier)
        L = cfg.levels
        self.coarse_dims = [sum(cfg.dims[l + 1:]) for l in range(L)]
        self.q_embed = nn.ModuleList(nn.Linear(max(c, 1), h) for c in self.coarse_dims)
        self.kv_embed = nn.ModuleList(nn.Linear(c + d, h) for c, d in zip(self.coarse_dims, cfg.dims))
        self.heads = nn.ModuleList(nn.Linear(h, 2 * d) for d in cfg.dims)
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            with torch.no_grad():
                head.bias[head.out_features // 2:] = math.log(math.expm1(2.0))

    def _params(self, level: int, z: torch.Tensor):
        D = self.cfg.dims[level]
        out = self.heads[level](z)
        mu, raw = out[:, :D], out[:, D:]
        return mu, SIGMA_MIN + F.softplus(raw)

    def _coarse(self, grids, level, pos):
        if level == self.cfg.levels - 1:
            return None
        return probe(grids[level + 1:], pos.to(grids[level + 1].dtype))

    def _q_in(self, level, coarse, n, dtype):
        if coarse is None:
            return self.hgla.mask_token.to(dtype).expand(n, -1)
        return self.q_embed[level](coarse)

    def _kv_in(self, level, coarse, values):
        x = values if coarse is None else torch.cat([coarse, values], -1)
        return self.kv_embed[level](x)

    def rate(self, grids: Sequence[torch.Tensor]) -> torch.Tensor:
        """Bits of ``grids`` (real or integer valued) with teacher forcing; differentiable."""
        total = grids[0].new_zeros(())
        scales, per_level = [], []
        for l in reversed(range(self.cfg.levels)):
            g = grids[l]
            plan = level_plan(g.shape)
            cells = [c for _, cs in plan for c in cs]
            pos = cell_positions(cells, g.shape)
            vals = g.reshape(-1, g.shape[-1])[_flat_index(cells, g.shape)]
            coarse = self._coarse(grids, l, pos)
            q = self._q_in(l, coarse, len(cells), g.dtype)
            kv = self._kv_in(l, coarse, vals)
            scales.append(ScaleStream(q, kv, [len(cs) for _, cs in plan], [k for k, _ in plan]))
            per_level.append((l, vals))
        zs = forward_chunked(self.hgla, scales)
        for (l, vals), z in zip(per_level, zs):
            mu, sigma = self._params(l, z)
            total = total + bits(vals, mu, sigma)
        return total

    def walk(self, shapes, visit: Callable, dtype=torch.float32) -> List[torch.Tensor]:
        """Recurrent coarse-to-fine traversal shared by the encoder and decoder.

        ``visit(level, cells, mu, sigma)`` returns the (n, D) values of the step's
        cells; only already-visited values are ever fed back, so the
        parameters of a step depend on earlier steps alone.
        """
        L = self.cfg.levels
        grids: List[Optional[torch.Tensor]] = [None] * L
        run = HglaRunner(self.hgla, dtype=dtype)
        with torch.no_grad():
            for l in reversed(range(L)):
                shape = shapes[l]
                plan = level_plan(shape)
                run.begin_scale(0.0, [k for k, _ in plan])
                flat = torch.zeros(shape[0] * shape[1] * shape[2], shape[3], dtype=dtype)
                for _, cells in plan:
                    pos = cell_positions(cells, shape)
                    coarse = self._coarse(grids, l, pos) if cells else None
                    if not cells:
                        run.query(torch.zeros(0, self.hgla.h, dtype=dtype))
                        run.commit(torch.zeros(0, self.hgla.h, dtype=dtype))
                        continue
                    z = run.query(self._q_in(l, coarse, len(cells), dtype))
                    mu, sigma = self._params(l, z)
                    vals = visit(l, cells, mu, sigma).to(dtype)
                    flat[_flat_index(cells, shape)] = vals
                    run.commit(self._kv_in(l, coarse, vals))
                run.end_scale()
                grids[l] = flat.view(*shape)
        return grids


class FactorizedPrior(nn.Module):
    """Per-level, per-channel discretised Gaussian; the stage-1 rate proxy."""

    def __init__(self, cfg: LatentConfig):
        super().__init__()
        self.mu = nn.ParameterList(nn.Parameter(torch.zeros(d)) for d in cfg.dims)
        self.raw_sigma = nn.ParameterList(nn.Parameter(torch.full((d,), 1.0)) for d in cfg.dims)

    def rate(self, grids: Sequence[torch.Tensor]) -> torch.Tensor:
        total = grids[0].new_zeros(())
        for g, mu, rs in zip(grids, self.mu, self.raw_sigma):
            total = total + bits(g, mu, SIGMA_MIN + F.softplus(rs))
        return total


def rate(grids: Sequence[torch.Tensor], model) -> torch.Tensor:
    return model.rate(grids)


# -- payload coding ----------------------------------------------------------------

class Transcript:
    """SHA-256 over every (mu, sigma) pair used for coding."""

    def __init__(self):
        self.h = hashlib.sha256()

    def add(self, mu, sigma):
        self.h.update(mu.detach().float().numpy().tobytes())
        self.h.update(sigma.detach().float().numpy().tobytes())

    def hexdigest(self):
        return self.h.hexdigest()


def encode_latents(model: ContextModel, grids: Sequence[torch.Tensor], transcript: Transcript | None = None):
    """Range-code integer grids; returns (per-level payloads, ideal bits)."""
    L = model.cfg.levels
    shapes = [tuple(g.shape) for g in grids]
    encs = [RangeEncoder() for _ in range(L)]
    counts = [0] * L
    ideal = [0.0]

    def visit(l, cells, mu, sigma):
        vals = grids[l].reshape(-1, shapes[l][3])[_flat_index(cells, shapes[l])]
        if transcript is not None:
            transcript.add(mu, sigma)
        freq = freq_table(mu.reshape(-1), sigma.reshape(-1))
        cdf = cdf_from_freq(freq)
        sym = (vals.reshape(-1).round().long() - Q_MIN).tolist()
        for n, s in enumerate(sym):
            if not 0 <= s < ALPHABET:
                raise ValueError("latent value outside the 8-bit alphabet")
            encs[l].encode(int(cdf[n, s]), int(freq[n, s]))
            ideal[0] -= math.log2(freq[n, s] / TOTAL)
        counts[l] += len(sym)
        return vals

    model.walk(shapes, visit, dtype=grids[0].dtype)
    payloads = [encs[l].finish() if counts[l] else b"" for l in range(L)]
    return payloads, ideal[0]


def decode_latents(model: ContextModel, shapes, payloads: Sequence[bytes], transcript: Transcript | None = None,
                   dtype=torch.float32) -> List[torch.Tensor]:
    L = model.cfg.levels
    decs = [RangeDecoder(p) for p in payloads]

    def visit(l, cells, mu, sigma):
        if transcript is not None:
            transcript.add(mu, sigma)
        freq = freq_table(mu.reshape(-1), sigma.reshape(-1))
        cdf = cdf_from_freq(freq)
        out = [decs[l].decode(cdf[n].tolist()) + Q_MIN for n in range(cdf.shape[0])]
        return torch.tensor(out, dtype=dtype).reshape(mu.shape)

    grids = model.walk(shapes, visit, dtype=dtype)
    for d in decs:
        d.check_end()
    return grids
