"""Toy-scale staged pretraining on synthetic clips."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import tokenizer as tk
from .latents import quantize, relax_uniform
from .model import GivicModel, canvas_denoiser, teacher_forced_loss
from .numerics import SeededRng
from .pyramid import consistency_loss

LN2 = math.log(2.0)


# -- synthetic data -----------------------------------------------------------------

def moving_gradient_clip(T: int = 8, H: int = 32, W: int = 32, speed: float = 1.0, dtype=torch.float32):
    """Smooth luma gradient with a drifting sinusoid and slowly varying chroma."""
    t = torch.arange(T, dtype=torch.float64)[:, None, None]
    y = torch.arange(H, dtype=torch.float64)[None, :, None]
    x = torch.arange(W, dtype=torch.float64)[None, None, :]
    Y = 0.2 + 0.5 * (x + y) / (H + W) + 0.15 * torch.sin((x + speed * 2 * t) / 5.0) * torch.cos(y / 7.0)
    U = 0.5 + 0.1 * torch.sin((y + speed * t) / 9.0) + 0 * x
    V = 0.5 + 0.1 * torch.cos((x - speed * t) / 8.0) + 0 * y
    return torch.stack(torch.broadcast_tensors(Y, U, V), -1).clamp(0, 1).to(dtype)


def synthetic_clip(rng: np.random.Generator, T: int = 8, H: int = 32, W: int = 32, dtype=torch.float32):
    """Random smooth moving content: a tilted gradient, drifting waves and one moving blob."""
    t = np.arange(T)[:, None, None]
    y = np.arange(H)[None, :, None]
    x = np.arange(W)[None, None, :]
    a, b = rng.uniform(-1, 1, 2)
    vx, vy = rng.uniform(-1.5, 1.5, 2)
    base = rng.uniform(0.2, 0.6) + 0.3 * (a * x + b * y) / (H + W)
    f1, f2 = rng.uniform(3, 9, 2)
    waves = rng.uniform(0.05, 0.2) * np.sin((x + vx * t) / f1 + rng.uniform(0, 6)) * np.cos((y + vy * t) / f2)
    cx, cy = rng.uniform(0, W), rng.uniform(0, H)
    r = rng.uniform(3, 8)
    blob = rng.uniform(-0.3, 0.3) * np.exp(-(((x - cx - vx * t) ** 2 + (y - cy - vy * t) ** 2) / (2 * r * r)))
    Y = base + waves + blob
    U = 0.5 + rng.uniform(-0.15, 0.15) * np.sin((x * a + y * b + t) / rng.uniform(6, 12)) + 0.2 * blob
    V = 0.5 + rng.uniform(-0.15, 0.15) * np.cos((x * b - y * a - t) / rng.uniform(6, 12)) - 0.2 * blob
    clip = np.stack(np.broadcast_arrays(Y, U, V), -1).clip(0, 1)
    return torch.from_numpy(clip).to(dtype)


def synthetic_dataset(n: int, seed: int = 0, T: int = 8, H: int = 32, W: int = 32) -> List[torch.Tensor]:
    rng = np.random.default_rng(seed)
    return [synthetic_clip(rng, T, H, W) for _ in range(n)]


# -- staged training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    stage_steps: tuple = (1500, 600, 600)
    lr: tuple = (2e-3, 2e-3, 5e-4)
    lam: float = 85.0
    consistency_weight: float = 1.0
    train_K: tuple = (4, 20)
    seed: int = 0
    ema: float = 0.9
    divergence_factor: float = 10.0


@dataclass
class StageLog:
    name: str
    losses: List[float] = field(default_factory=list)

    def smoothed(self, window: int = 20):
        w = max(1, min(window, len(self.losses) // 4 or 1))
        head = float(np.mean(self.losses[:w]))
        tail = float(np.mean(self.losses[-w:]))
        return head, tail


class TrainingDivergenceError(RuntimeError):
    pass


def _params(*modules):
    out = []
    for m in modules:
        out += list(m.parameters())
    return out


def _distortion_term(model, Xp, grids, K, rng, seed):
    mse = teacher_forced_loss(model, Xp, grids, K, rng, seed, noise_scale=_noise_scales(K, rng))
    return mse * Xp.numel() / (2 * model.cfg.sigma_d ** 2), mse


def _noise_scales(K, rng: SeededRng):
    u = rng.child("scales").uniform((K + 1,), dtype=torch.float64)
    return [float(v) for v in u]


def stage_losses(model: GivicModel, X: torch.Tensor, stage: int, cfg: TrainConfig, rng: SeededRng):
    """(loss, parts) for one clip in ``stage`` (1, 2 or 3); losses are per pixel element."""
    Xp, _ = tk.pad_gop(X, model.geometry)
    n = Xp.numel()
    K = cfg.train_K[int(rng.child("K").integers(0, len(cfg.train_K)))]
    seed = int(rng.child("seed").integers(0, 2 ** 31))
    if stage == 2:
        with torch.no_grad():
            q = [quantize(g)[0] for g in model.encoder(Xp)]
        r = model.context.rate(q)
        return r / n, {"rate": float(r.detach())}
    y = model.encoder(Xp)
    noisy = [relax_uniform(g, rng.child(f"u{l}")) for l, g in enumerate(y)]
    if stage == 1:
        d, mse = _distortion_term(model, Xp, noisy, K, rng, seed)
        r = model.factorized.rate(noisy)
        loss = (d + cfg.lam * r * LN2) / n
        return loss, {"mse": float(mse.detach()), "rate": float(r.detach())}
    d, mse = _distortion_term(model, Xp, noisy, K, rng, seed)
    r = model.context.rate(noisy)
    pyr = model.cfg.pyramid(model.cfg.K_infer)
    j = int(rng.child("tau").integers(1, pyr.K))
    t_k = min(1.0, (j + float(rng.child("tp").uniform((1,), dtype=torch.float64))) / pyr.K)
    cons = consistency_loss(canvas_denoiser(model, noisy, K), Xp, t_k, rng.child("cons"), pyr)
    loss = (d + cfg.lam * r * LN2) / n + cfg.consistency_weight * cons
    return loss, {"mse": float(mse.detach()), "rate": float(r.detach()), "consistency": float(cons.detach())}


def run_stage(model: GivicModel, clips: Sequence[torch.Tensor], stage: int, steps: int, cfg: TrainConfig,
              log: Optional[Callable] = None) -> StageLog:
    if stage == 1:
        params = _params(model.encoder, model.denoiser, model.hgla, model.token_embed, model.factorized)
    elif stage == 2:
        params = _params(model.context)
    else:
        params = _params(model.encoder, model.denoiser, model.hgla, model.token_embed, model.context)
    for p in model.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=cfg.lr[stage - 1])
    rng = SeededRng(cfg.seed).child(f"stage{stage}")
    slog = StageLog(f"stage{stage}")
    ref, ema = None, None
    for step in range(steps):
        srng = rng.child(step)
        X = clips[int(srng.child("clip").integers(0, len(clips)))]
        loss, parts = stage_losses(model, X, stage, cfg, srng)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergenceError(f"non-finite loss in stage {stage} at step {step}")
        ema = value if ema is None else cfg.ema * ema + (1 - cfg.ema) * value
        if step == 10:
            ref = ema
        if ref is not None and ema > cfg.divergence_factor * ref:
            raise TrainingDivergenceError(f"stage {stage} diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 10.0)
        opt.step()
        slog.losses.append(value)
        if log and (step % 100 == 0 or step == steps - 1):
            log(f"stage {stage} step {step}: loss {value:.4f} " + " ".join(f"{k} {v:.4g}" for k, v in parts.items()))
    for p in model.parameters():
        p.requires_grad_(True)
    return slog


def train_toy(clips: Sequence[torch.Tensor], cfg: TrainConfig = TrainConfig(), model: Optional[GivicModel] = None,
              log: Optional[Callable] = None, stages=(1, 2, 3)):
    """Three-stage pretraining; returns (model, {stage: StageLog})."""
    model = model or GivicModel(seed=cfg.seed)
    logs: Dict[int, StageLog] = {}
    for s in stages:
        logs[s] = run_stage(model, clips, s, cfg.stage_steps[s - 1], cfg, log)
    return model, logs
