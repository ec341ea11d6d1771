"""Model container: architecture config, weights I/O and the diffusion decode path."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from . import tokenizer as tk
from .bitstream import dump_weights, load_weights
from .denoiser import Denoiser, normalized_center, normalized_origin, reverse_step
from .entropy import ContextModel, FactorizedPrior
from .hgla import HGLA, HglaRunner, ScaleStream, forward_chunked
from .latents import LatentConfig, LatentEncoder, probe
from .numerics import SeededRng
from .pyramid import PyramidConfig, downsample, resize
from .tokenizer import TokenGeometry


@dataclass(frozen=True)
class ModelConfig:
    token: Tuple[int, int, int] = (4, 4, 4)
    r_max: Tuple[float, float] = (4.0, 8.0)
    beta_max: float = 0.6
    K_train: int = 500
    K_infer: int = 20
    K_enc: int = 4
    h: int = 16
    M: int = 4
    carrier: str = "verbatim"
    den_width: int = 64
    den_layers: int = 4
    latent_dims: Tuple[int, ...] = (2, 2, 2)
    latent_t_stride: int = 2
    latent_s_stride: int = 4
    sigma_d: float = 2.0 / 255.0
    path1_orientation: str = "flipped"

    def __post_init__(self):
        if self.K_infer > self.K_train:
            raise ValueError("K_infer must not exceed K_train")

    @property
    def geometry(self) -> TokenGeometry:
        return TokenGeometry(*self.token)

    @property
    def latent(self) -> LatentConfig:
        return LatentConfig(tuple(self.latent_dims), self.latent_t_stride, self.latent_s_stride)

    def pyramid(self, K: Optional[int] = None) -> PyramidConfig:
        return PyramidConfig(K or self.K_infer, tuple(self.r_max), self.beta_max,
                             self.path1_orientation, True, self.K_train)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in names}
        return cls(**kw)


class GivicModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.cfg = cfg
        lat = cfg.latent
        self.encoder = LatentEncoder(lat)
        self.denoiser = Denoiser(cfg.geometry, lat.total_dim, cfg.h, cfg.den_width, cfg.den_layers)
        self.hgla = HGLA(cfg.h, cfg.M, cfg.carrier)
        self.token_embed = nn.Linear(cfg.geometry.size, cfg.h)
        self.context = ContextModel(lat, cfg.h, cfg.M, cfg.carrier)
        self.factorized = FactorizedPrior(lat)

    @property
    def geometry(self) -> TokenGeometry:
        return self.cfg.geometry

    # -- weights -------------------------------------------------------------
    def to_bytes(self) -> bytes:
        return dump_weights(self.cfg.to_dict(), dict(self.state_dict()))

    def save(self, path) -> bytes:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).digest()

    @classmethod
    def from_bytes(cls, data: bytes):
        config, tensors, digest = load_weights(data)
        m = cls(ModelConfig.from_dict(config))
        m.load_state_dict(tensors)
        m.weights_hash = digest
        return m

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())

    def content_hash(self) -> bytes:
        return getattr(self, "weights_hash", None) or hashlib.sha256(self.to_bytes()).digest()

    # -- diffusion pieces ------------------------------------------------------
    def denoise_fn(self, grids: Sequence[torch.Tensor], pyramid: PyramidConfig) -> Callable:
        geom = self.geometry

        def fn(noisy, z, k, K, refs, extents):
            dtype = noisy.dtype
            pos = normalized_origin(refs, extents).to(dtype)
            feats = probe(grids, normalized_center(refs, extents, geom).to(dtype))
            return self.denoiser(noisy, z, k / K, pos, feats, pyramid.beta_increment(k, K))

        return fn


class HglaConditioning:
    """Feeds the diffusion HGLA step by step during the reverse process."""

    def __init__(self, model: GivicModel, pyramid: PyramidConfig, K: int, dtype=torch.float32):
        self.model, self.pyramid, self.K = model, pyramid, K
        self.run = HglaRunner(model.hgla, dtype=dtype)
        self.h = model.cfg.h
        self.dtype = dtype

    @property
    def steps_executed(self) -> int:
        return self.run.steps_executed

    def begin_scale(self, k, steps):
        self.k = k
        self.run.begin_scale(self.pyramid.delta((k - 1) / self.K), [s.key for s in steps])

    def query(self, step, noisy):
        if noisy.shape[0] == 0:
            return self.run.query(noisy.new_zeros(0, self.h))
        if self.k == self.K:
            q = self.model.hgla.mask_token.to(noisy.dtype).expand(noisy.shape[0], -1)
        else:
            q = self.model.token_embed(noisy)
        return self.run.query(q)

    def commit(self, step, denoised):
        if denoised.shape[0] == 0:
            self.run.commit(denoised.new_zeros(0, self.h))
        else:
            self.run.commit(self.model.token_embed(denoised))

    def end_scale(self):
        self.run.end_scale()


class OracleDenoiser:
    """Returns the noise that maps each upsampled token exactly onto DS(X, R^{k-1}).

    Decoding with it telescopes to the clean clip whatever the prior sample.
    """

    def __init__(self, X_padded: torch.Tensor, pyramid: PyramidConfig, geometry: TokenGeometry):
        self.X, self.pyramid, self.geometry = X_padded, pyramid, geometry

    def __call__(self, noisy, z, k, K, refs, extents):
        pyr = self.pyramid.with_K(K)
        target = downsample(self.X, pyr.factors((k - 1) / K)) if k > 1 else self.X
        padded = tk.pad_to_tokens(target.to(noisy.dtype), self.geometry)
        idx = tk.token_index(refs, padded.shape, self.geometry)
        return (noisy - tk.gather_tokens(padded, idx)) / pyr.beta_increment(k, K)


def prior_sample(seed: int, extents, dtype=torch.float32) -> torch.Tensor:
    return SeededRng(seed).child("prior").normal(tuple(extents) + (3,), dtype=dtype)


@dataclass
class ReconstructionInfo:
    steps_executed: int
    schedule_steps: int


def reconstruct(model: GivicModel, grids: Sequence[torch.Tensor], shape, K: int, seed: int,
                denoise: Optional[Callable] = None, dtype=torch.float32):
    """Run K reverse steps from the seeded prior to a canvas with padded ``shape`` (T, H, W).

    Returns (canvas, ReconstructionInfo).
    """
    pyr = model.cfg.pyramid(K)
    geom = model.geometry
    T, H, W = shape
    sched = tk.build_schedule(T, H, W, geom, K, pyr)
    canvas = prior_sample(seed, pyr.extents(shape, 1.0), dtype)
    cond = HglaConditioning(model, pyr, K, dtype)
    fn = denoise or model.denoise_fn(grids, pyr)
    by_k = {}
    for st in sched.steps:
        by_k.setdefault(st.k, []).append(st)
    for k in range(K, 0, -1):
        ext = pyr.extents(shape, (k - 1) / K)
        canvas = reverse_step(canvas, k, K, by_k[k], fn, cond, pyr, geom, ext)
    return canvas, ReconstructionInfo(cond.steps_executed, len(sched))


def training_targets(X: torch.Tensor, K: int, pyr: PyramidConfig, rng: SeededRng, seed: int,
                     noise_scale: Optional[List[float]] = None):
    """Per-step (input canvas at scale k, clean target at scale k-1), k = K..1.

    The input at k = K is the prior sample; below it is DS(X, R^k) plus a
    scaled copy of the forward noise beta_bar(tau_k) * eps.
    """
    shape = X.shape[:3]
    out = []
    for k in range(K, 0, -1):
        t = k / K
        if k == K:
            inp = prior_sample(seed, pyr.extents(shape, 1.0), X.dtype)
        else:
            s = 1.0 if noise_scale is None else noise_scale[k]
            inp = downsample(X, pyr.factors(t)) + s * pyr.beta_bar(t) * rng.child(k).normal(
                pyr.extents(shape, t) + (3,), dtype=X.dtype)
        tgt = downsample(X, pyr.factors((k - 1) / K)) if k > 1 else X
        out.append((k, inp, tgt))
    return out


def teacher_forced_loss(model: GivicModel, X: torch.Tensor, grids: Sequence[torch.Tensor], K: int,
                        rng: SeededRng, seed: int, noise_scale=None) -> torch.Tensor:
    """Mean squared error of every denoised token against its clean target, all scales at once.

    The HGLA sees the ground-truth targets of earlier steps (chunked mode).
    """
    pyr = model.cfg.pyramid(K)
    geom = model.geometry
    T, H, W = X.shape[:3]
    sched = tk.build_schedule(T, H, W, geom, K, pyr)
    by_k = {}
    for st in sched.steps:
        by_k.setdefault(st.k, []).append(st)
    scales, batches = [], []
    for k, inp, tgt in training_targets(X, K, pyr, rng, seed, noise_scale):
        ext = tgt.shape[:3]
        noisy_c = tk.pad_to_tokens(resize(inp, ext), geom)
        tgt_c = tk.pad_to_tokens(tgt, geom)
        steps = by_k[k]
        refs = [r for st in steps for r in st.tokens]
        idx = tk.token_index(refs, noisy_c.shape, geom)
        noisy = tk.gather_tokens(noisy_c, idx)
        target = tk.gather_tokens(tgt_c, idx)
        q = model.hgla.mask_token.expand(len(refs), -1) if k == K else model.token_embed(noisy)
        kv = model.token_embed(target)
        scales.append(ScaleStream(q, kv, [len(st.tokens) for st in steps], [st.key for st in steps],
                                  pyr.delta((k - 1) / K)))
        batches.append((k, refs, ext, noisy, target))
    zs = forward_chunked(model.hgla, scales)
    fn = model.denoise_fn(grids, pyr)
    err, count = 0.0, 0
    for (k, refs, ext, noisy, target), z in zip(batches, zs):
        eps = fn(noisy, z, k, K, refs, ext)
        den = noisy - pyr.beta_increment(k, K) * eps
        err = err + ((den - target) ** 2).sum()
        count += target.numel()
    return err / count


def canvas_denoiser(model: GivicModel, grids: Sequence[torch.Tensor], K: int):
    """Denoiser applied to a whole canvas at diffusion time t (no HGLA context), for consistency."""
    geom = model.geometry
    pyr = model.cfg.pyramid(K)

    def fn(canvas, t):
        ext = canvas.shape[:3]
        padded = tk.pad_to_tokens(canvas, geom)
        lat = tk.lattice_of(ext, geom)
        refs = [tk.TokenRef(0, i, 1, u, v, (i * geom.r_t, u * geom.r_h, v * geom.r_w))
                for i in range(lat[0]) for u in range(lat[1]) for v in range(lat[2])]
        idx = tk.token_index(refs, padded.shape, geom)
        noisy = tk.gather_tokens(padded, idx)
        pos = normalized_origin(refs, ext).to(canvas.dtype)
        feats = probe(grids, normalized_center(refs, ext, geom).to(canvas.dtype))
        z = canvas.new_zeros(len(refs), model.cfg.h)
        return model.denoiser(noisy, z, t, pos, feats)

    return fn
