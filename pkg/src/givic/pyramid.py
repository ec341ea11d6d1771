"""Forward diffusion over continuous spatiotemporal resolutions.

Resampling is separable: each axis is multiplied by a small (n_out x n_in)
matrix. Integer factors give mean pooling; fractional factors sample linearly
at output-cell centres (the trilinear operator restricted to one axis).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence, Tuple

import torch

from .numerics import SeededRng, ceil_div


def _is_int(f: float) -> bool:
    return abs(f - round(f)) < 1e-9


@lru_cache(maxsize=4096)
def _axis_matrix(n_in: int, n_out: int, factor: float | None, dtype) -> torch.Tensor:
    """Resampling matrix for one axis.

    ``factor`` is the downsampling factor when the output extent follows from
    it (DS); ``None`` means interpolate to an explicit extent.
    """
    m = torch.zeros(n_out, n_in, dtype=torch.float64)
    if factor is not None and _is_int(factor):
        f = int(round(factor))
        for i in range(n_out):
            lo, hi = i * f, min((i + 1) * f, n_in)
            m[i, lo:hi] = 1.0 / (hi - lo)
    else:
        scale = n_in / n_out if factor is None else factor
        for i in range(n_out):
            src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
            i0 = int(math.floor(src))
            i1 = min(i0 + 1, n_in - 1)
            w = src - i0
            m[i, i0] += 1.0 - w
            m[i, i1] += w
    return m.to(dtype)


def _apply(x: torch.Tensor, mats) -> torch.Tensor:
    mt, mh, mw = mats
    if mt is not None:
        x = torch.einsum("ot,thwc->ohwc", mt, x)
    if mh is not None:
        x = torch.einsum("oh,thwc->towc", mh, x)
    if mw is not None:
        x = torch.einsum("ow,thwc->thoc", mw, x)
    return x


def downsample(x: torch.Tensor, factor: Tuple[float, float]) -> torch.Tensor:
    """DS(x, (f_t, f_s)) for a T x H x W x C tensor; output extents ceil(n / f)."""
    f_t, f_s = factor
    if f_t < 1 or f_s < 1:
        raise ValueError("downsampling factors must be >= 1")
    T, H, W, _ = x.shape
    ext = (ceil_div(T, f_t), ceil_div(H, f_s), ceil_div(W, f_s))
    if min(ext) < 1:
        raise ValueError("downsampled extent is zero")
    mats = []
    for n_in, n_out, f in zip((T, H, W), ext, (f_t, f_s, f_s)):
        mats.append(None if (n_in == n_out and _is_int(f)) else _axis_matrix(n_in, n_out, float(f), x.dtype))
    return _apply(x, mats)


def resize(x: torch.Tensor, extents: Sequence[int]) -> torch.Tensor:
    """Trilinear interpolation to explicit extents (identity when they already match)."""
    T, H, W, _ = x.shape
    if min(extents) < 1:
        raise ValueError("resize target extent is zero")
    mats = []
    for n_in, n_out in zip((T, H, W), extents):
        mats.append(None if n_in == n_out else _axis_matrix(n_in, int(n_out), None, x.dtype))
    return _apply(x, mats)


def upsample(x: torch.Tensor, factor: Tuple[float, float]) -> torch.Tensor:
    """US(x, (f_t, f_s)): trilinear interpolation to round(n * f) extents."""
    f_t, f_s = factor
    T, H, W, _ = x.shape
    return resize(x, (max(1, round(T * f_t)), max(1, round(H * f_s)), max(1, round(W * f_s))))


@dataclass(frozen=True)
class PyramidConfig:
    K: int = 20
    r_max: Tuple[float, float] = (4.0, 8.0)  # (temporal, spatial)
    beta_max: float = 0.6
    # "verbatim": path 1 weights (t_k, 1 - t_k) on (clean DS, noisy US);
    # "flipped": (1 - t_k, t_k)
    path1_orientation: str = "verbatim"
    shared_noise: bool = True
    noise_grid: int = 500  # training tau grid resolution (K_train)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if min(self.r_max) < 1:
            raise ValueError("R_max components must be >= 1")
        if self.path1_orientation not in ("verbatim", "flipped"):
            raise ValueError("path1_orientation must be 'verbatim' or 'flipped'")

    def tau(self, j: int) -> float:
        return j / self.K

    def taus(self):
        return [self.tau(j) for j in range(self.K + 1)]

    def factors(self, t: float) -> Tuple[float, float]:
        if t == 0:
            return (1.0, 1.0)
        return (self.r_max[0] ** t, self.r_max[1] ** t)

    def beta_bar(self, t: float) -> float:
        return self.beta_max * t

    def beta_increment(self, k: int, K: int | None = None) -> float:
        K = K or self.K
        return self.beta_bar(k / K) - self.beta_bar((k - 1) / K)

    def extents(self, shape: Sequence[int], t: float) -> Tuple[int, int, int]:
        f_t, f_s = self.factors(t)
        T, H, W = shape[:3]
        return (ceil_div(T, f_t), ceil_div(H, f_s), ceil_div(W, f_s))

    def delta(self, t: float) -> float:
        """HGLA gate bias log(R_t R_s / R_t,max R_s,max) at diffusion time t."""
        f_t, f_s = self.factors(t)
        return math.log((f_t * f_s) / (self.r_max[0] * self.r_max[1]))

    def with_K(self, K: int) -> "PyramidConfig":
        return PyramidConfig(K, self.r_max, self.beta_max, self.path1_orientation,
                             self.shared_noise, self.noise_grid)


@dataclass
class CorruptionState:
    t: float
    factors: Tuple[float, float]
    beta_bar: float
    seed: int


def corruption_state(cfg: PyramidConfig, t: float, rng: SeededRng) -> CorruptionState:
    return CorruptionState(t, cfg.factors(t), cfg.beta_bar(t), rng.seed)


def noise_stream(rng: SeededRng, cfg: PyramidConfig, t: float) -> SeededRng:
    """Noise stream for diffusion time t; shared between any two uses of the same t."""
    return rng.child(int(round(t * cfg.noise_grid)))


def corrupt(X: torch.Tensor, t: float, rng: SeededRng, cfg: PyramidConfig | None = None,
            eps: torch.Tensor | None = None) -> torch.Tensor:
    """X^t = DS(X, R(t)) + beta_bar(t) * eps."""
    cfg = cfg or PyramidConfig()
    if not 0 <= t <= 1:
        raise ValueError("t must lie in [0, 1]")
    x = downsample(X, cfg.factors(t)) if t > 0 else X.clone()
    b = cfg.beta_bar(t)
    if b == 0:
        return x
    if eps is None:
        eps = rng.normal(x.shape, dtype=X.dtype)
    return x + b * eps


def level_sample(X: torch.Tensor, t: float, rng: SeededRng, cfg: PyramidConfig) -> torch.Tensor:
    """Forward sample at time t drawn from the t-keyed noise stream."""
    return corrupt(X, t, noise_stream(rng, cfg, t) if cfg.shared_noise else rng, cfg)


def interval_of(t: float, cfg: PyramidConfig, interval: int | None = None):
    if not 0 <= t <= 1:
        raise ValueError("t_k must lie in [0, 1]")
    if interval is None:
        j = min(int(math.floor(t * cfg.K + 1e-12)), cfg.K - 1)
    else:
        j = interval
    lo, hi = cfg.tau(j), cfg.tau(j + 1)
    if not lo - 1e-12 <= t <= hi + 1e-12:
        raise ValueError(f"t_k={t} outside interval {j}")
    tp = (t - lo) / (hi - lo)
    return j, min(max(tp, 0.0), 1.0)


def interp_paths(x: torch.Tensor, t_k: float, cfg: PyramidConfig, rng: SeededRng,
                 interval: int | None = None):
    """The two interpolation paths to the corrupted state at time t_k.

    Both outputs are resampled to the extents of scale t_k. With shared noise,
    each x^tau is drawn from the tau-keyed stream so both paths and repeated
    calls see the same realisations.
    """
    j, tp = interval_of(t_k, cfg, interval)
    ext = cfg.extents(x.shape, t_k)
    clean = downsample(x, cfg.factors(t_k)) if t_k > 0 else x
    x_K = level_sample(x, 1.0, rng, cfg)
    noisy = resize(x_K, ext)
    w = t_k if cfg.path1_orientation == "verbatim" else 1.0 - t_k
    path1 = w * clean + (1.0 - w) * noisy
    x_lo = level_sample(x, cfg.tau(j), rng, cfg)
    x_hi = level_sample(x, cfg.tau(j + 1), rng, cfg)
    if tp == 0.0:
        path2 = resize(x_lo, ext)
    elif tp == 1.0:
        path2 = resize(x_hi, ext)
    else:
        path2 = tp * resize(x_hi, ext) + (1.0 - tp) * resize(x_lo, ext)
    return path1, path2


def consistency_loss(denoiser: Callable[[torch.Tensor, float], torch.Tensor], x: torch.Tensor,
                     t_k: float, rng: SeededRng, cfg: PyramidConfig, interval: int | None = None):
    """Mean squared difference of the denoiser outputs on the two paths."""
    p1, p2 = interp_paths(x, t_k, cfg, rng, interval)
    return torch.mean((denoiser(p1, t_k) - denoiser(p2, t_k)) ** 2)
