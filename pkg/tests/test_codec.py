import math

import pytest
import torch

from givic import tokenizer as tk
from givic.codec import (CodecConfig, NonFiniteLossError, RdReport, WeightsMismatchError, decode,
                         distortion_nll, encode, rd_loss)
from givic.latents import LatentConfig, quantize
from givic.model import (GivicModel, ModelConfig, OracleDenoiser, canvas_denoiser, prior_sample, reconstruct,
                         teacher_forced_loss)
from givic.numerics import SeededRng, analytic_grad, finite_diff_grad, grad_rel_error
from givic.pyramid import PyramidConfig
from givic.training import moving_gradient_clip

TINY = ModelConfig(h=8, M=1, den_width=16, den_layers=1, K_infer=4, K_enc=2)


@pytest.fixture(scope="module")
def tiny():
    return GivicModel(TINY, seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        CodecConfig(lam=0)
    with pytest.raises(ValueError):
        CodecConfig(lam=-1)
    with pytest.raises(ValueError):
        ModelConfig(K_infer=600)


def test_model_config_roundtrip():
    cfg = ModelConfig()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_weights_roundtrip(tiny, tmp_path):
    digest = tiny.save(tmp_path / "w.gvwt")
    m = GivicModel.load(tmp_path / "w.gvwt")
    assert m.content_hash() == digest
    for (a, p), (b, q) in zip(tiny.state_dict().items(), m.state_dict().items()):
        assert a == b and torch.equal(p, q)


def test_rd_loss_lambda_zero(tiny):
    X = moving_gradient_clip(4, 16, 16)
    lat = [g.detach() for g in tiny.encoder(tk.pad_gop(X, tiny.geometry)[0])]
    loss, rep = rd_loss(X, lat, tiny, 0.0)
    assert rep.rate_bits == 0.0
    assert math.isclose(loss.item(), rep.distortion_nll, rel_tol=1e-6)
    assert rep.consistent()


def test_rd_loss_parts(tiny):
    X = moving_gradient_clip(4, 16, 16)
    lat = [quantize(g.detach())[0] for g in tiny.encoder(tk.pad_gop(X, tiny.geometry)[0])]
    loss, rep = rd_loss(X, lat, tiny, 380.0)
    assert rep.consistent(1e-6)
    assert rep.rate_bits > 0
    assert math.isclose(rep.loss, rep.distortion_nll + 380 * rep.rate_bits * math.log(2), rel_tol=1e-6)


def test_report_consistency_check():
    r = RdReport(0.0, 100.0, 10.0, 0.0, 380 * 8 * 10 * math.log(2) / 8, 380.0, 1)
    assert r.consistent()
    r.loss += 1.0
    assert not r.consistent()


def test_perfect_reconstruction_uniform_model():
    X = torch.rand(2, 2, 2, 3, dtype=torch.float64)
    assert distortion_nll(X, X, 0.01).item() == 0.0
    N = 10
    r = RdReport(0.0, 100.0, 8.0 * N, 0.0, 85 * 8 * N * math.log(2), 85.0, N)
    assert r.consistent()


def test_non_finite_loss(tiny):
    X = moving_gradient_clip(4, 16, 16)
    lat = [g.detach() for g in tiny.encoder(tk.pad_gop(X, tiny.geometry)[0])]
    lat[0] = lat[0].clone()
    lat[0][0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError):
        rd_loss(X, lat, tiny, 85.0)


def test_rd_loss_gradient_wrt_latents():
    cfg = ModelConfig(h=8, M=1, den_width=8, den_layers=1, K_infer=2, K_enc=2, latent_dims=(1,),
                      token=(1, 2, 2))
    m = GivicModel(cfg, seed=1).double()
    for p in m.parameters():
        p.requires_grad_(False)
    X = moving_gradient_clip(2, 8, 8, dtype=torch.float64)
    shape = cfg.latent.shapes(2, 8, 8)[0]
    assert shape == (2, 2, 2, 1)
    y0 = torch.randn(shape, dtype=torch.float64, generator=torch.Generator().manual_seed(0))

    def f(y):
        return rd_loss(X, [y], m, 85.0, K=2)[0]

    assert grad_rel_error(analytic_grad(f, y0), finite_diff_grad(f, y0, delta=1e-4)) <= 1e-3


def test_oracle_pipeline_reconstructs_clip(tiny):
    X = moving_gradient_clip(8, 32, 32, dtype=torch.float64)
    Xp, crop = tk.pad_gop(X, tiny.geometry)
    for K in (1, 4, 20):
        pyr = tiny.cfg.pyramid(K)
        oracle = OracleDenoiser(tk.pad_to_tokens(Xp, tiny.geometry), pyr, tiny.geometry)
        with torch.no_grad():
            rec, info = reconstruct(tiny.double(), [], Xp.shape[:3], K, seed=7, denoise=oracle, dtype=torch.float64)
        tiny.float()
        assert (tk.crop(rec, crop) - X).abs().max() <= 1e-4
        assert info.steps_executed == info.schedule_steps


def test_decode_step_count():
    m = GivicModel(ModelConfig(h=8, M=1, den_width=8, den_layers=1, token=(4, 8, 8)), seed=0)
    grids = [torch.zeros(s) for s in m.cfg.latent.shapes(20, 16, 16)]
    with torch.no_grad():
        _, info = reconstruct(m, grids, (20, 16, 16), 20, seed=0)
    assert info.steps_executed == 400 == info.schedule_steps


def test_encode_decode_determinism(tiny):
    X = moving_gradient_clip(4, 16, 16)
    cfg = CodecConfig(lam=380, steps=3, seed=5)
    a = encode(X, tiny, cfg)
    b = encode(X, tiny, cfg)
    assert a.bitstream.to_bytes() == b.bitstream.to_bytes()
    r1 = decode(a.bitstream.to_bytes(), tiny)
    r2 = decode(a.bitstream.to_bytes(), tiny)
    assert torch.equal(r1, r2)
    assert r1.shape == X.shape and r1.min() >= 0 and r1.max() <= 1
    assert a.report.rate_bits == a.bitstream.payload_bits()
    assert a.report.consistent()
    assert len(a.report.trace) == 3
    assert all(p.requires_grad for p in tiny.parameters())


def test_report_from_true_decode(tiny):
    X = moving_gradient_clip(4, 16, 16)
    res = encode(X, tiny, CodecConfig(lam=85, steps=1, seed=0))
    rec = decode(res.bitstream, tiny)
    mse = float(((X.double() - rec.double()) ** 2).mean())
    assert math.isclose(res.report.mse, mse, rel_tol=1e-9)


def test_weights_mismatch(tiny):
    X = moving_gradient_clip(4, 16, 16)
    res = encode(X, tiny, CodecConfig(steps=0))
    other = GivicModel(TINY, seed=1)
    with pytest.raises(WeightsMismatchError):
        decode(res.bitstream, other)


def test_encode_divergence():
    from givic.codec import EncodeDivergenceError
    m = GivicModel(TINY, seed=0)
    X = moving_gradient_clip(4, 16, 16)
    with pytest.raises(EncodeDivergenceError):
        encode(X, m, CodecConfig(lam=85, steps=30, lr=1e4, divergence_factor=1.0001))
    assert all(p.requires_grad for p in m.parameters())


def test_prior_is_seeded():
    a = prior_sample(3, (2, 4, 4))
    assert torch.equal(a, prior_sample(3, (2, 4, 4)))
    assert not torch.equal(a, prior_sample(4, (2, 4, 4)))


def test_teacher_forced_loss_differentiable(tiny):
    X = moving_gradient_clip(4, 16, 16)
    Xp, _ = tk.pad_gop(X, tiny.geometry)
    grids = tiny.encoder(Xp)
    loss = teacher_forced_loss(tiny, Xp, grids, 4, SeededRng(0), 0)
    loss.backward()
    assert tiny.denoiser.head.weight.grad is not None
    assert tiny.hgla.gamma.grad is not None
    tiny.zero_grad()


def test_canvas_denoiser_shapes(tiny):
    X = moving_gradient_clip(4, 16, 16)
    Xp, _ = tk.pad_gop(X, tiny.geometry)
    grids = [g.detach() for g in tiny.encoder(Xp)]
    fn = canvas_denoiser(tiny, grids, 4)
    c = torch.rand(3, 5, 5, 3)
    out = fn(c, 0.5)
    assert out.shape[1] == tiny.geometry.size
