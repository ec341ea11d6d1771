"""End-to-end codec: RD objective, encode-time latent overfitting and decoding."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import torch

from . import tokenizer as tk
from .bitstream import Bitstream, BitstreamError, lambda_index
from .entropy import Transcript, decode_latents, encode_latents
from .latents import AnnealSchedule, encode_relaxation, quantize
from .model import GivicModel, reconstruct
from .numerics import SeededRng
from .video_io import psnr_tensor

LN2 = math.log(2.0)


class EncodeDivergenceError(RuntimeError):
    pass


class NonFiniteLossError(ArithmeticError):
    pass


class WeightsMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    lam: float = 380.0
    steps: int = 200
    lr: float = 0.05
    seed: int = 0
    K_infer: Optional[int] = None  # defaults to the model's
    K_enc: Optional[int] = None
    polish_steps: int = 20  # final steps that differentiate through the full K_infer decode
    anneal_alpha: tuple = (1.0, 8.0)
    anneal_a: tuple = (1.0, 2.0)
    divergence_factor: float = 10.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.steps < 0:
            raise ValueError("step count must be nonnegative")


@dataclass
class RdReport:
    mse: float
    psnr: float
    rate_bits: float
    distortion_nll: float
    loss: float
    lam: float
    pixels: int
    trace: List[float] = field(default_factory=list)
    steps_executed: int = 0

    @property
    def bpp(self) -> float:
        return self.rate_bits / self.pixels

    def consistent(self, tol: float = 1e-6) -> bool:
        expect = self.distortion_nll + self.lam * self.rate_bits * LN2
        return abs(expect - self.loss) <= tol * max(1.0, abs(expect))


def distortion_nll(x: torch.Tensor, rec: torch.Tensor, sigma_d: float) -> torch.Tensor:
    """Gaussian negative log-likelihood of x given rec, without the constant term."""
    return ((x - rec) ** 2).sum() / (2.0 * sigma_d ** 2)


def rd_loss(X: torch.Tensor, latents: Sequence[torch.Tensor], model: GivicModel, lam: float,
            K: Optional[int] = None, seed: int = 0, dist_latents: Optional[Sequence[torch.Tensor]] = None):
    """distortion_nll + lambda * rate_bits * ln 2 on a reduced-step decode; differentiable in the latents.

    ``X`` is an unpadded clip; ``latents`` feed the rate and, unless
    ``dist_latents`` is given, the decoder too.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    K = K or model.cfg.K_enc
    Xp, rec_crop = tk.pad_gop(X, model.geometry)
    rec, info = reconstruct(model, dist_latents if dist_latents is not None else latents,
                            Xp.shape[:3], K, seed, dtype=X.dtype)
    rec = tk.crop(rec, rec_crop)
    d = distortion_nll(X, rec, model.cfg.sigma_d)
    r = model.context.rate(latents) if lam > 0 else X.new_zeros(())
    loss = d + lam * r * LN2
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite RD loss (distortion {float(d.detach())}, rate {float(r.detach())})")
    rec = rec.detach()
    mse = float(((X - rec) ** 2).mean())
    report = RdReport(mse, psnr_tensor(X, rec), float(r.detach()), float(d.detach()), float(loss.detach()), lam, X.shape[0] * X.shape[1] * X.shape[2],
                      steps_executed=info.steps_executed)
    return loss, report


def _bitstream(model, X, grids, cfg: CodecConfig, chroma: str) -> Bitstream:
    payloads, _ = encode_latents(model.context, grids)
    T, H, W = X.shape[:3]
    K = cfg.K_infer or model.cfg.K_infer
    return Bitstream(W, H, T, K, cfg.seed, model.content_hash(), [tuple(int(s) for s in g.shape) for g in grids],
                     payloads, lambda_index(cfg.lam), chroma)


def decode(bs: Bitstream | bytes, model: GivicModel, dtype=torch.float32, return_info: bool = False):
    """Reconstruct the clip (T, H, W, 3) in [0, 1] from a bitstream."""
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bytes(bs))
    if bs.weights_hash != model.content_hash():
        raise WeightsMismatchError("bitstream was produced with different model weights")
    if bs.L != model.cfg.latent.levels:
        raise BitstreamError("latent level count does not match the model", 0)
    grids = decode_latents(model.context, bs.shapes, bs.payloads, dtype=dtype)
    geom = model.geometry
    probe_clip = torch.zeros(bs.frames, bs.height, bs.width, 3)
    Xp, crop = tk.pad_gop(probe_clip, geom)
    with torch.no_grad():
        rec, info = reconstruct(model, grids, Xp.shape[:3], bs.K, bs.seed, dtype=dtype)
    out = tk.crop(rec, crop).clamp(0, 1)
    return (out, info) if return_info else out


def evaluate(X: torch.Tensor, bs: Bitstream, model: GivicModel, lam: float) -> RdReport:
    """Report from a true decode of ``bs``; the rate is the payload size."""
    rec, info = decode(bs, model, return_info=True)
    d = float(distortion_nll(X.double(), rec.double(), model.cfg.sigma_d))
    rate = float(bs.payload_bits())
    mse = float(((X.double() - rec.double()) ** 2).mean())
    return RdReport(mse, psnr_tensor(X, rec), rate, d, d + lam * rate * LN2, lam,
                    X.shape[0] * X.shape[1] * X.shape[2], steps_executed=info.steps_executed)


@dataclass
class EncodeResult:
    bitstream: Bitstream
    report: RdReport
    initial: RdReport
    latents: List[torch.Tensor]
    seconds: float


def encode(X: torch.Tensor, model: GivicModel, cfg: CodecConfig = CodecConfig(), chroma: str = "420",
           log=None) -> EncodeResult:
    """Overfit the latents of one GOP and emit its bitstream.

    Only the latents are optimised; the model stays fixed.
    """
    t0 = time.perf_counter()
    model.eval()
    saved = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        return _encode(X, model, cfg, chroma, log, t0)
    finally:
        for p, flag in zip(model.parameters(), saved):
            p.requires_grad_(flag)


def _encode(X, model, cfg, chroma, log, t0) -> EncodeResult:
    geom = model.geometry
    Xp, _ = tk.pad_gop(X, geom)
    with torch.no_grad():
        init = [g.detach().clone() for g in model.encoder(Xp)]
    q0 = [quantize(g)[0] for g in init]
    initial = evaluate(X, _bitstream(model, X, q0, cfg, chroma), model, cfg.lam)
    ys = [g.clone().requires_grad_(True) for g in init]
    opt = torch.optim.Adam(ys, lr=cfg.lr)
    sched = AnnealSchedule(cfg.steps, cfg.anneal_alpha, cfg.anneal_a)
    rng = SeededRng(cfg.seed).child("encode")
    K_enc = cfg.K_enc or model.cfg.K_enc
    K_full = cfg.K_infer or model.cfg.K_infer
    trace, start = [], None
    for step in range(cfg.steps):
        alpha, a = sched.at(step)
        srng = rng.child(step)
        pairs = [encode_relaxation(y, alpha, a, srng.child(l)) for l, y in enumerate(ys)]
        K = K_full if step >= cfg.steps - cfg.polish_steps else K_enc
        loss, rep = rd_loss(X, [p[0] for p in pairs], model, cfg.lam, K, cfg.seed,
                            dist_latents=[p[1] for p in pairs])
        value = float(loss.detach())
        if start is None:
            start = value
        elif value > cfg.divergence_factor * start:
            raise EncodeDivergenceError(f"RD loss diverged at step {step}: {value:.4g} > "
                                        f"{cfg.divergence_factor} x {start:.4g}")
        trace.append(value)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log and (step % 50 == 0 or step == cfg.steps - 1):
            log(f"step {step}: loss {value:.1f} rate {rep.rate_bits:.0f} bits psnr {rep.psnr:.2f}")
    q = []
    for y in ys:
        v, overflow = quantize(y.detach())
        if overflow and log:
            log("latent values clamped to the 8-bit alphabet")
        q.append(v)
    bs = _bitstream(model, X, q, cfg, chroma)
    report = evaluate(X, bs, model, cfg.lam)
    report.trace = trace
    return EncodeResult(bs, report, initial, q, time.perf_counter() - t0)
