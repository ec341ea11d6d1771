"""Tokenization-and-shuffle: RA temporal hierarchy, Quincunx spatial groups and the
full decode schedule over the scale pyramid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Sequence, Tuple

import torch

from .numerics import ceil_div

N_SPATIAL_GROUPS = 5


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class TokenGeometry:
    r_t: int = 4
    r_h: int = 8
    r_w: int = 8

    def __post_init__(self):
        if min(self.r_t, self.r_h, self.r_w) < 1:
            raise ConfigurationError("token extents must be >= 1")

    @property
    def size(self) -> int:
        return self.r_t * self.r_h * self.r_w * 3

    def as_tuple(self):
        return (self.r_t, self.r_h, self.r_w)


@dataclass(frozen=True)
class TokenRef:
    k: int
    i: int  # temporal subgroup
    d: int  # spatial group 1..5
    u: int  # lattice row
    v: int  # lattice col
    pos: Tuple[int, int, int]  # (frame, row, col) of token origin at scale k


@dataclass
class Step:
    k: int
    level: int
    d: int
    tokens: List[TokenRef]

    @property
    def key(self):
        return (self.level, self.d)


@dataclass
class DecodeSchedule:
    steps: List[Step]
    n_levels: int
    lattices: dict = field(default_factory=dict)  # k -> (n_t, n_h, n_w)

    def __len__(self):
        return len(self.steps)

    def steps_for_scale(self, k: int) -> List[Step]:
        return [s for s in self.steps if s.k == k]

    def to_csv_rows(self):
        rows = []
        for n, st in enumerate(self.steps):
            for t in st.tokens:
                rows.append((n, st.k, st.level, t.i, t.d, t.u, t.v, "%d:%d:%d" % t.pos))
        return rows


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def temporal_order(n_t: int) -> List[List[int]]:
    """Random-access hierarchy over ``n_t = 2^m + 1`` subgroups.

    Level 0 holds the first subgroup, level 1 the last, and every further level
    holds the midpoints of the intervals left by the levels before it.
    """
    if n_t < 2 or not _is_pow2(n_t - 1):
        raise ConfigurationError(f"N_t={n_t}: N_t - 1 must be a power of two")
    levels = [[0], [n_t - 1]]
    intervals = [(0, n_t - 1)]
    while intervals and intervals[0][1] - intervals[0][0] > 1:
        mids, nxt = [], []
        for a, b in intervals:
            m = (a + b) // 2
            mids.append(m)
            nxt += [(a, m), (m, b)]
        levels.append(mids)
        intervals = nxt
    return levels


def n_temporal_levels(n_t: int) -> int:
    return int(math.log2(n_t - 1)) + 2


def general_temporal_order(n_t: int, n_levels: int | None = None) -> List[List[int]]:
    """Temporal levels for any subgroup count.

    Counts that are not ``2^m + 1`` use the hierarchy of the next conforming
    count with out-of-range indices dropped. The list is padded with empty
    levels up to ``n_levels`` so every scale has the same number of steps.
    """
    if n_t <= 1:
        levels = [[0]]
    else:
        m = math.ceil(math.log2(n_t - 1))
        levels = [[i for i in lev if i < n_t] for lev in temporal_order(2 ** m + 1)]
    if n_levels is not None:
        if len(levels) > n_levels:
            raise ConfigurationError("scale has more temporal levels than the finest scale")
        levels += [[] for _ in range(n_levels - len(levels))]
    return levels


def _natural_quincunx(n_h: int, n_w: int):
    g = {d: [] for d in range(1, 6)}
    for u in range(n_h):
        for v in range(n_w):
            if (u + v) % 2 == 1:
                g[5].append((u, v))
            elif u % 2 == 1:
                g[4].append((u, v))
            else:
                hu, hv = u // 2, v // 2
                if (hu + hv) % 2 == 1:
                    g[3].append((u, v))
                elif hu % 2 == 1:
                    g[2].append((u, v))
                else:
                    g[1].append((u, v))
    return g


@lru_cache(maxsize=None)
def _quincunx_cached(n_h: int, n_w: int):
    n_s = n_h * n_w
    if n_s < 16:
        groups = {1: [(u, v) for u in range(n_h) for v in range(n_w)], 2: [], 3: [], 4: [], 5: []}
        return groups, True
    nat = _natural_quincunx(n_h, n_w)
    c = -(-n_s // 16)
    sizes = {1: c, 2: c, 3: 2 * c, 4: 4 * c}
    order = nat[1] + nat[2] + nat[3] + nat[4] + nat[5]
    groups, at = {}, 0
    for d in (1, 2, 3, 4):
        groups[d] = sorted(order[at: at + sizes[d]])
        at += sizes[d]
    groups[5] = sorted(order[at:])
    return groups, False


def quincunx_groups(n_h: int, n_w: int):
    """Assign every lattice coordinate to one of G_1..G_5.

    Returns ``(groups, degenerate)``; lattices with fewer than 16 tokens put
    every token in G_1 and report ``degenerate=True``.
    """
    groups, degenerate = _quincunx_cached(n_h, n_w)
    return {d: list(v) for d, v in groups.items()}, degenerate


def lattice_steps(n_t: int, n_h: int, n_w: int, n_levels: int | None = None):
    """Ordered ``(level, d, [(i, u, v), ...])`` steps covering an ``n_t x n_h x n_w`` lattice."""
    levels = general_temporal_order(n_t, n_levels)
    groups, _ = quincunx_groups(n_h, n_w)
    out = []
    for lev, subgroups in enumerate(levels):
        for d in range(1, N_SPATIAL_GROUPS + 1):
            cells = [(i, u, v) for i in sorted(subgroups) for (u, v) in groups[d]]
            out.append((lev, d, cells))
    return out


def lattice_of(extents: Sequence[int], geometry: TokenGeometry):
    t, h, w = extents
    return (ceil_div(t, geometry.r_t), ceil_div(h, geometry.r_h), ceil_div(w, geometry.r_w))


def scale_steps(k: int, extents, geometry: TokenGeometry, n_levels: int) -> List[Step]:
    n_t, n_h, n_w = lattice_of(extents, geometry)
    steps = []
    for lev, d, cells in lattice_steps(n_t, n_h, n_w, n_levels):
        toks = [TokenRef(k, i, d, u, v, (i * geometry.r_t, u * geometry.r_h, v * geometry.r_w))
                for (i, u, v) in cells]
        steps.append(Step(k, lev, d, toks))
    return steps


def build_schedule(T: int, H: int, W: int, geometry: TokenGeometry, K: int, pyramid) -> DecodeSchedule:
    """Decode order for K reverse steps; step ``k`` denoises tokens on the scale-(k-1) canvas.

    ``pyramid`` must provide ``extents((T, H, W), t)``; T/H/W are padded GOP extents.
    """
    n_t = ceil_div(T, geometry.r_t)
    n_levels = n_temporal_levels(n_t)
    if not _is_pow2(n_t - 1):
        raise ConfigurationError(f"N_t={n_t}: N_t - 1 must be a power of two (pad the GOP)")
    steps, lattices = [], {}
    for k in range(K, 0, -1):
        ext = pyramid.extents((T, H, W), (k - 1) / K)
        lattices[k] = lattice_of(ext, geometry)
        steps += scale_steps(k, ext, geometry, n_levels)
    return DecodeSchedule(steps, n_levels, lattices)


def expected_step_count(n_t: int, K: int) -> int:
    return 5 * K * n_temporal_levels(n_t)


# -- GOP padding -----------------------------------------------------------------

@dataclass(frozen=True)
class CropRecord:
    T: int
    H: int
    W: int


def padded_subgroups(n: int) -> int:
    if n <= 2:
        return 2
    return 2 ** math.ceil(math.log2(n - 1)) + 1


def pad_gop(clip: torch.Tensor, geometry: TokenGeometry):
    """Pad a T x H x W x 3 GOP so that N_t = 2^m + 1 and H, W are token multiples."""
    T, H, W, _ = clip.shape
    if T < 1:
        raise ConfigurationError("empty GOP")
    n_t = padded_subgroups(ceil_div(T, geometry.r_t))
    T2 = n_t * geometry.r_t
    H2 = ceil_div(H, geometry.r_h) * geometry.r_h
    W2 = ceil_div(W, geometry.r_w) * geometry.r_w
    x = clip
    if T2 > T:
        x = torch.cat([x, x[-1:].expand(T2 - T, H, W, 3)], 0)
    if H2 > H:
        x = torch.cat([x, x[:, -1:].expand(T2, H2 - H, W, 3)], 1)
    if W2 > W:
        x = torch.cat([x, x[:, :, -1:].expand(T2, H2, W2 - W, 3)], 2)
    return x.contiguous(), CropRecord(T, H, W)


def crop(x: torch.Tensor, record: CropRecord) -> torch.Tensor:
    return x[: record.T, : record.H, : record.W]


# -- token extraction ------------------------------------------------------------

def pad_to_tokens(canvas: torch.Tensor, geometry: TokenGeometry) -> torch.Tensor:
    """Edge-replicate a canvas (T,H,W,3) up to token multiples."""
    T, H, W, C = canvas.shape
    T2 = ceil_div(T, geometry.r_t) * geometry.r_t
    H2 = ceil_div(H, geometry.r_h) * geometry.r_h
    W2 = ceil_div(W, geometry.r_w) * geometry.r_w
    ti = torch.clamp(torch.arange(T2), max=T - 1)
    hi = torch.clamp(torch.arange(H2), max=H - 1)
    wi = torch.clamp(torch.arange(W2), max=W - 1)
    return canvas[ti][:, hi][:, :, wi]


def token_index(refs: Sequence[TokenRef], padded_shape, geometry: TokenGeometry) -> torch.Tensor:
    """Flat indices (N, r_t*r_h*r_w*3) gathering each token from a padded canvas."""
    _, H, W, C = padded_shape
    rt, rh, rw = geometry.as_tuple()
    dt, dh, dw, dc = torch.meshgrid(torch.arange(rt), torch.arange(rh), torch.arange(rw),
                                    torch.arange(C), indexing="ij")
    local = ((dt * H + dh) * W + dw) * C + dc
    local = local.reshape(-1)
    if not refs:
        return torch.zeros(0, local.numel(), dtype=torch.long)
    origin = torch.tensor([((f * H + r) * W + c) * C for (f, r, c) in (t.pos for t in refs)])
    return origin[:, None] + local[None, :]


def gather_tokens(padded: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return padded.reshape(-1)[idx]


def scatter_tokens(padded: torch.Tensor, idx: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    flat = padded.reshape(-1).index_copy(0, idx.reshape(-1), values.reshape(-1))
    return flat.view(padded.shape)
