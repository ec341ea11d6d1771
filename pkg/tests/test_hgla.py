import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from givic.hgla import (HGLA, HglaRunner, ScaleStream, ScheduleError, bench, decay_gates, delta_matrix,
                        forward_chunked, forward_recurrent, hgla_step, linear_fit_r2, random_streams)

torch.set_default_dtype(torch.float32)


def test_hand_step():
    S = torch.tensor([[0.5]])
    o, S_new = hgla_step(torch.zeros(1, 1), S, torch.tensor([[2.0]]), torch.tensor([[2.0]]),
                         torch.tensor([[3.0]]), torch.tensor([0.8]), gate=1.0)
    assert math.isclose(S_new.item(), 6.4, rel_tol=1e-6)
    assert math.isclose(o.item(), 1.0, rel_tol=1e-6)


def test_gate_zero_empty_prev():
    q = torch.randn(3, 4)
    o, _ = hgla_step(torch.zeros(4, 4), torch.randn(4, 4), q, q, q, torch.ones(4), gate=0.0)
    assert torch.count_nonzero(o) == 0


def test_empty_group():
    C = torch.randn(4, 4)
    a = torch.rand(4)
    o, S = hgla_step(torch.zeros(4, 4), C, torch.zeros(0, 4), torch.zeros(0, 4), torch.zeros(0, 4), a, gate=1.0)
    assert o.shape[0] == 0 and torch.allclose(S, C * a[None, :])


def test_decay_examples():
    a = decay_gates(torch.zeros(2, 2))
    assert torch.allclose(a, torch.tensor([[0.5, 0.5], [1.0, 1.0]]))
    assert torch.count_nonzero(delta_matrix((4, 8), (4, 8), 3, 2)) == 0
    d = delta_matrix((2, 4), (4, 8), 1, 1)
    assert math.isclose(d.item(), math.log(0.25), rel_tol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000), st.floats(-5, 0))
def test_decay_invariants(M, h, seed, delta):
    g = torch.randn(M, h, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * 3
    a = decay_gates(g, delta)
    assert torch.all(a > 0) and torch.all(a <= 1 + 1e-12)
    assert torch.all(a[1:] >= a[:-1] - 1e-12)
    assert torch.allclose(a[-1], torch.ones(h, dtype=torch.float64), atol=1e-6)


def test_qkv_linear():
    layer = HGLA(8, 2).layers[0]
    x = torch.randn(5, 8)
    assert all(torch.count_nonzero(t) == 0 for t in layer.qkv(torch.zeros(1, 8)))
    for a, b in zip(layer.qkv(2.5 * x), layer.qkv(x)):
        assert torch.allclose(a, 2.5 * b, atol=1e-5)
    with torch.no_grad():
        layer.W_q.weight.copy_(torch.eye(8))
    assert torch.allclose(layer.qkv(x)[0], x)


def mask_stream(model, n, keys):
    q = model.mask_token.detach().expand(n, -1).clone()
    return ScaleStream(q, torch.randn(n, model.h), [n], keys)


def test_mask_input_content_independent():
    torch.manual_seed(0)
    m = HGLA(8, 2)
    with torch.no_grad():
        a = forward_recurrent(m, [mask_stream(m, 3, [(0, 1)])])[0]
        b = forward_recurrent(m, [mask_stream(m, 3, [(0, 1)])])[0]
    assert torch.equal(a, b)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mode_parity(seed):
    gen = torch.Generator().manual_seed(seed)
    m = HGLA(8, 4).double()
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
        streams = random_streams(8, 3, 64, gen, torch.float64)
        r = forward_recurrent(m, streams)
        for cs in (1, 3, None):
            c = forward_chunked(m, streams, chunk_steps=cs)
            for a, b in zip(r, c):
                assert (a - b).abs().max() <= 1e-10 * max(1.0, a.abs().max().item())


def test_mode_parity_float32_and_variant():
    gen = torch.Generator().manual_seed(5)
    for carrier in ("verbatim", "sequential"):
        m = HGLA(8, 4, carrier)
        with torch.no_grad():
            streams = random_streams(8, 2, 64, gen)
            r = forward_recurrent(m, streams)
            c = forward_chunked(m, streams, chunk_steps=4)
        for a, b in zip(r, c):
            assert (a - b).norm() <= 1e-5 * max(1.0, a.norm().item())


def test_causality():
    gen = torch.Generator().manual_seed(3)
    m = HGLA(8, 2).double()
    streams = random_streams(8, 2, 40, gen, torch.float64)
    with torch.no_grad():
        base = forward_recurrent(m, streams)
        sc = streams[1]
        cut = sum(sc.step_sizes[:3])
        kv = sc.kv_in.clone()
        kv[cut:] += 5.0  # perturb committed inputs of steps >= 3
        q = sc.q_in.clone()
        q[cut:] += 5.0
        pert = forward_recurrent(m, [streams[0], ScaleStream(q, kv, sc.step_sizes, sc.step_keys, sc.delta)])
    assert torch.equal(base[0], pert[0])
    assert torch.allclose(base[1][:cut], pert[1][:cut])
    # perturbing a step's own kv leaves its own outputs untouched
    with torch.no_grad():
        kv2 = sc.kv_in.clone()
        kv2[: sc.step_sizes[0]] += 3.0
        same = forward_recurrent(m, [streams[0], ScaleStream(sc.q_in, kv2, sc.step_sizes, sc.step_keys, sc.delta)])
    assert torch.allclose(base[1][: sc.step_sizes[0]], same[1][: sc.step_sizes[0]])


def test_truncation():
    gen = torch.Generator().manual_seed(4)
    m = HGLA(8, 2)
    s = random_streams(8, 1, 30, gen)[0]
    with torch.no_grad():
        full = forward_recurrent(m, [s])[0]
        k = 3
        n = sum(s.step_sizes[:k])
        part = forward_recurrent(m, [ScaleStream(s.q_in[:n], s.kv_in[:n], s.step_sizes[:k], s.step_keys[:k])])[0]
    assert torch.equal(full[:n], part)


def test_runner_schedule_errors():
    m = HGLA(8, 1)
    run = HglaRunner(m)
    with pytest.raises(ScheduleError):
        run.query(torch.zeros(1, 8))
    run.begin_scale(0.0, [(0, 1)])
    run.query(torch.zeros(1, 8))
    run.commit(torch.zeros(1, 8))
    with pytest.raises(ScheduleError):
        run.commit(torch.zeros(1, 8))
    run2 = HglaRunner(m)
    run2.begin_scale(0.0, [(0, 1), (0, 2)])
    with pytest.raises(ScheduleError):
        run2.end_scale()
    with pytest.raises(ScheduleError):
        ScaleStream(torch.zeros(3, 8), torch.zeros(3, 8), [2], [(0, 1)])


def test_bench_rows():
    rows = bench(HGLA(8, 2), [64, 128], repeats=1)
    assert [r.n for r in rows] == [64, 128] and all(r.seconds > 0 for r in rows)
    assert rows[0].state_bytes == rows[1].state_bytes
    assert math.isclose(linear_fit_r2([1, 2, 3], [2, 4, 6]), 1.0)
