"""Hierarchically gated linear attention.

Each layer keeps one h x h state per scale. Within a scale the state advances
once per schedule step; across scales a step reads the coarse state of the
step with the same (temporal level, spatial group) position as its carrier.

Every token carries two inputs:

* ``q_in``: what is known before its step (drives the conditioning output z);
* ``kv_in``: what is known once its step is decoded (feeds the state update).

Both streams run through the same layers and read the same pre-step states, so
z of a token never depends on its own step or later steps.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

CARRIER_MODES = ("verbatim", "sequential")


class ScheduleError(RuntimeError):
    pass


class ChunkAlignmentError(ValueError):
    pass


def delta_matrix(r_k: Sequence[float], r_K: Sequence[float], M: int, h: int, dtype=torch.float32):
    """Gate bias log(R_t^k R_s^k / R_t^K R_s^K) broadcast to M x h."""
    val = math.log((r_k[0] * r_k[1]) / (r_K[0] * r_K[1]))
    return torch.full((M, h), val, dtype=dtype)


def decay_gates(gamma: torch.Tensor, delta: torch.Tensor | float = 0.0) -> torch.Tensor:
    """alpha = cumsum(softmax(gamma + delta, dim=0), dim=0) over the layer axis."""
    return torch.cumsum(torch.softmax(gamma + delta, dim=0), dim=0)


def pool(S: torch.Tensor) -> torch.Tensor:
    """Average pooling of an (..., h, h) state to an h-vector of row means."""
    return S.mean(dim=-1)


def mix_output(q, S_prev, C, g):
    """o = (g * C + (1 - g) * S_prev) q, with g gating the output rows."""
    if S_prev.dim() == 2:
        oc, op = q @ C.T, q @ S_prev.T
    else:
        oc = torch.einsum("nij,nj->ni", C, q)
        op = torch.einsum("nij,nj->ni", S_prev, q)
    return g * oc + (1 - g) * op


def state_update(carrier_state, k, v, alpha):
    """S_new = carrier . Diag(alpha) + sum over the group of v (x) k."""
    S = carrier_state * alpha[None, :]
    if k.shape[0]:
        S = S + v.T @ k
    return S


def hgla_step(S_prev, C, q, k, v, alpha, W_g=None, b_g=None, gate=None, carrier="verbatim"):
    """One layer, one schedule step: per-token outputs and the post-step state.

    ``gate`` forces g (scalar or h-vector) instead of computing it from W_g/b_g.
    """
    if gate is None:
        pc = pool(C).expand(q.shape[0], -1)
        g = torch.sigmoid(torch.cat([q, pc], -1) @ W_g.T + b_g)
    else:
        g = torch.as_tensor(gate, dtype=q.dtype).expand_as(q) if q.shape[0] else q
    o = mix_output(q, S_prev, C, g) if q.shape[0] else q
    base = C if carrier == "verbatim" else S_prev
    return o, state_update(base, k, v, alpha)


class HGLALayer(nn.Module):
    def __init__(self, h: int, mlp_ratio: int = 2):
        super().__init__()
        self.h = h
        self.ln1 = nn.LayerNorm(h)
        self.W_q = nn.Linear(h, h, bias=False)
        self.W_k = nn.Linear(h, h, bias=False)
        self.W_v = nn.Linear(h, h, bias=False)
        self.W_g = nn.Linear(2 * h, h)
        self.W_o = nn.Linear(h, h, bias=False)
        self.ln2 = nn.LayerNorm(h)
        self.ff1 = nn.Linear(h, mlp_ratio * h)
        self.ff2 = nn.Linear(mlp_ratio * h, h)

    def qkv(self, x):
        return self.W_q(x), self.W_k(x), self.W_v(x)

    def gate(self, q, C):
        pc = pool(C)
        if pc.dim() == 1:
            pc = pc.expand(q.shape[0], -1)
        return torch.sigmoid(self.W_g(torch.cat([q, pc], -1)))

    def forward(self, x, S_prev, C):
        """Residual block; returns the new stream and the (k, v) of its inputs."""
        xn = self.ln1(x)
        q, k, v = self.qkv(xn)
        o = mix_output(q, S_prev, C, self.gate(q, C))
        x = x + self.W_o(o)
        x = x + self.ff2(F.gelu(self.ff1(self.ln2(x))))
        return x, k, v


class HGLA(nn.Module):
    def __init__(self, h: int = 16, M: int = 4, carrier: str = "verbatim", mlp_ratio: int = 2):
        super().__init__()
        if carrier not in CARRIER_MODES:
            raise ValueError(f"carrier must be one of {CARRIER_MODES}")
        self.h, self.M, self.carrier = h, M, carrier
        self.gamma = nn.Parameter(torch.zeros(M, h))
        self.mask_token = nn.Parameter(torch.randn(h) * 0.5)
        self.layers = nn.ModuleList(HGLALayer(h, mlp_ratio) for _ in range(M))
        self.ln_out = nn.LayerNorm(h)

    def alpha(self, delta: float) -> torch.Tensor:
        return decay_gates(self.gamma, delta)

    def state_bytes(self) -> int:
        return self.M * self.h * self.h * self.gamma.element_size()


@dataclass
class ScaleStream:
    """Tokens of one scale in schedule order."""

    q_in: torch.Tensor  # (N, h)
    kv_in: Optional[torch.Tensor]  # (N, h)
    step_sizes: List[int]
    step_keys: List[tuple]
    delta: float = 0.0

    def __post_init__(self):
        if sum(self.step_sizes) != self.q_in.shape[0]:
            raise ScheduleError("step sizes do not cover the token stream")
        if len(self.step_keys) != len(self.step_sizes):
            raise ScheduleError("one key per step required")


def carrier_index(fine_keys, coarse_keys) -> List[Optional[int]]:
    """Index of the coarse step sharing each fine step's (level, group) position."""
    if not coarse_keys:
        return [None] * len(fine_keys)
    lookup = {key: n for n, key in enumerate(coarse_keys)}
    max_lev = max(k[0] for k in coarse_keys)
    out = []
    for lev, d in fine_keys:
        out.append(lookup.get((min(lev, max_lev), d)))
    return out


class HglaRunner:
    """Step-by-step (recurrent) execution used at decode time.

    Per step: ``query`` the conditioning for the step's tokens, then ``commit``
    the decoded inputs of the same tokens to advance the states.
    """

    def __init__(self, model: HGLA, dtype=None):
        self.model = model
        p = model.gamma
        self.dtype = dtype or p.dtype
        self.prev_states: Optional[List[torch.Tensor]] = None
        self.prev_keys: Optional[List[tuple]] = None
        self.steps_executed = 0
        self._in_scale = False

    def _zeros(self):
        m = self.model
        return torch.zeros(m.M, m.h, m.h, dtype=self.dtype)

    def begin_scale(self, delta: float, step_keys: Sequence[tuple]):
        self.alpha = self.model.alpha(delta)
        self.keys = list(step_keys)
        self.cmap = carrier_index(self.keys, self.prev_keys)
        self.S = self._zeros()
        self.step = 0
        self.states: List[torch.Tensor] = []
        self._queried = False
        self._in_scale = True

    def carrier(self) -> torch.Tensor:
        idx = self.cmap[self.step]
        if idx is None:
            return self._zeros()
        return self.prev_states[idx]

    def query(self, q_in: torch.Tensor) -> torch.Tensor:
        if not self._in_scale or self.step >= len(self.keys):
            raise ScheduleError("query outside the active schedule")
        self._queried = True
        if q_in.shape[0] == 0:
            return q_in
        C = self.carrier()
        x = q_in
        for m, layer in enumerate(self.model.layers):
            x, _, _ = layer(x, self.S[m], C[m])
        return self.model.ln_out(x)

    def commit(self, kv_in: torch.Tensor):
        if not self._in_scale or self.step >= len(self.keys):
            raise ScheduleError("commit outside the active schedule")
        C = self.carrier()
        x = kv_in
        new = []
        for m, layer in enumerate(self.model.layers):
            base = C[m] if self.model.carrier == "verbatim" else self.S[m]
            if x.shape[0]:
                x_next, k, v = layer(x, self.S[m], C[m])
                new.append(state_update(base, k, v, self.alpha[m]))
                x = x_next
            else:
                new.append(base * self.alpha[m][None, :])
        self.S = torch.stack(new)
        self.states.append(self.S)
        self.step += 1
        self.steps_executed += 1
        self._queried = False

    def end_scale(self):
        if self.step != len(self.keys):
            raise ScheduleError("scale ended before all steps were committed")
        self.prev_states, self.prev_keys = self.states, self.keys
        self._in_scale = False


def _step_slices(sizes):
    out, at = [], 0
    for n in sizes:
        out.append(slice(at, at + n))
        at += n
    return out


def forward_recurrent(model: HGLA, scales: Sequence[ScaleStream]) -> List[torch.Tensor]:
    """Teacher-forced recurrent pass; returns z per scale (N_scale x h)."""
    run = HglaRunner(model, dtype=scales[0].q_in.dtype if scales else None)
    outs = []
    for sc in scales:
        run.begin_scale(sc.delta, sc.step_keys)
        zs = []
        for sl in _step_slices(sc.step_sizes):
            zs.append(run.query(sc.q_in[sl]))
            run.commit(sc.kv_in[sl])
        run.end_scale()
        outs.append(torch.cat(zs, 0) if zs else sc.q_in[:0])
    return outs


def _chunks(sizes, chunk_steps=None, chunk_tokens=None):
    n = len(sizes)
    if chunk_tokens is not None:
        bounds = [0]
        acc = 0
        for s in sizes:
            acc += s
            bounds.append(acc)
        total = bounds[-1]
        cuts = list(range(chunk_tokens, total, chunk_tokens))
        bset = set(bounds)
        for c in cuts:
            if c not in bset:
                raise ChunkAlignmentError(f"chunk boundary at token {c} splits a schedule step")
        step_cuts = [bounds.index(c) for c in cuts]
        edges = [0] + step_cuts + [n]
        return [(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    cs = chunk_steps or n or 1
    return [(a, min(a + cs, n)) for a in range(0, n, cs)]


def forward_chunked(model: HGLA, scales: Sequence[ScaleStream], chunk_steps: int | None = None,
                    chunk_tokens: int | None = None, return_states: bool = False):
    """Chunk-parallel pass: all tokens of a chunk of steps are processed at once, layer by layer."""
    if not scales:
        return []
    dtype = scales[0].q_in.dtype
    M, h = model.M, model.h
    prev_states = None  # (n_steps, M, h, h)
    prev_keys = None
    outs, all_states = [], []
    for sc in scales:
        alpha = model.alpha(sc.delta)
        n_steps = len(sc.step_sizes)
        cmap = carrier_index(sc.step_keys, prev_keys)
        zero = torch.zeros(h, h, dtype=dtype)
        carriers = torch.stack([
            prev_states[i] if i is not None else torch.zeros(M, h, h, dtype=dtype) for i in cmap
        ]) if n_steps else torch.zeros(0, M, h, h, dtype=dtype)
        step_of_token = torch.repeat_interleave(torch.arange(n_steps), torch.tensor(sc.step_sizes, dtype=torch.long))
        offsets = [0]
        for s in sc.step_sizes:
            offsets.append(offsets[-1] + s)
        S_init = [zero] * M
        scale_states = []
        zs = []
        for a, b in _chunks(sc.step_sizes, chunk_steps, chunk_tokens):
            t0, t1 = offsets[a], offsets[b]
            sid = step_of_token[t0:t1] - a
            xq, xkv = sc.q_in[t0:t1], sc.kv_in[t0:t1]
            nc = b - a
            chunk_states = []
            for m, layer in enumerate(model.layers):
                Cm = carriers[a:b, m]
                k = layer.W_k(layer.ln1(xkv))
                v = layer.W_v(layer.ln1(xkv))
                KV = torch.zeros(nc, h, h, dtype=dtype).index_add_(0, sid, v[:, :, None] * k[:, None, :])
                am = alpha[m]
                if model.carrier == "verbatim":
                    S_steps = Cm * am[None, None, :] + KV
                else:
                    s_idx = torch.arange(nc)
                    lag = (s_idx[:, None] - s_idx[None, :]).to(dtype)
                    causal = (lag >= 0).to(dtype)
                    W = torch.exp(lag.clamp(min=0)[:, :, None] * torch.log(am)[None, None, :]) * causal[:, :, None]
                    S_steps = torch.einsum("srj,rij->sij", W, KV)
                    init_decay = torch.exp((s_idx + 1).to(dtype)[:, None] * torch.log(am)[None, :])
                    S_steps = S_steps + S_init[m][None] * init_decay[:, None, :]
                S_prev = torch.cat([S_init[m][None], S_steps[:-1]], 0)
                Sp_tok, C_tok = S_prev[sid], Cm[sid]
                xq, _, _ = layer(xq, Sp_tok, C_tok)
                xkv, _, _ = layer(xkv, Sp_tok, C_tok)
                S_init[m] = S_steps[-1]
                chunk_states.append(S_steps)
            zs.append(model.ln_out(xq))
            scale_states.append(torch.stack(chunk_states, 1))  # (nc, M, h, h)
        outs.append(torch.cat(zs, 0) if zs else sc.q_in[:0])
        prev_states = torch.cat(scale_states, 0) if scale_states else None
        prev_keys = sc.step_keys
        all_states.append(prev_states)
    if return_states:
        return outs, all_states
    return outs


# -- synthetic streams and benchmark -------------------------------------------------

def random_streams(h: int, n_scales: int, tokens_per_scale: int, gen: torch.Generator,
                   dtype=torch.float32, max_step: int = 6) -> List[ScaleStream]:
    """Random multi-scale token streams with random step partitions (tests, benchmarks)."""
    out = []
    keys_pool = [(lev, d) for lev in range(16) for d in range(1, 6)]
    for s in range(n_scales):
        sizes, left = [], tokens_per_scale
        while left > 0:
            n = int(torch.randint(0, max_step + 1, (1,), generator=gen))
            n = min(n, left)
            sizes.append(n)
            left -= n
        keys = keys_pool[: len(sizes)] if len(sizes) <= len(keys_pool) else \
            [(i // 5, i % 5 + 1) for i in range(len(sizes))]
        q = torch.randn(tokens_per_scale, h, generator=gen, dtype=dtype)
        kv = torch.randn(tokens_per_scale, h, generator=gen, dtype=dtype)
        out.append(ScaleStream(q, kv, sizes, keys, delta=-(n_scales - 1 - s) * 0.7))
    return out


@dataclass
class BenchRow:
    n: int
    seconds: float
    state_bytes: int


def bench(model: HGLA, lengths: Sequence[int], mode: str = "recurrent", tokens_per_step: int = 8,
          repeats: int = 3, seed: int = 0) -> List[BenchRow]:
    """Wall time of one single-scale pass per context length (best of ``repeats`` after a warm-up)."""
    rows = []
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for n in lengths:
            n_steps = -(-n // tokens_per_step)
            sizes = [tokens_per_step] * (n_steps - 1) + [n - tokens_per_step * (n_steps - 1)]
            keys = [(i // 5, i % 5 + 1) for i in range(n_steps)]
            q = torch.randn(n, model.h, generator=gen)
            kv = torch.randn(n, model.h, generator=gen)
            stream = [ScaleStream(q, kv, sizes, keys)]
            best = math.inf
            # one untimed pass absorbs allocator and thread-pool start-up
            for r in range(repeats + 1):
                t0 = time.perf_counter()
                if mode == "recurrent":
                    forward_recurrent(model, stream)
                else:
                    forward_chunked(model, stream, chunk_steps=64)
                if r:
                    best = min(best, time.perf_counter() - t0)
            rows.append(BenchRow(n, best, model.state_bytes()))
    return rows


def linear_fit_r2(xs, ys) -> float:
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    syy = sum((y - my) ** 2 for y in ys)
    if syy == 0:
        return 1.0
    return (sxy * sxy) / (sxx * syy)
