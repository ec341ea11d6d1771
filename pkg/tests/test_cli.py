import csv
import io
import math
import shutil
from pathlib import Path

import pytest
import torch

from givic.cli import main, read_config_file
from givic.video_io import RdPoint, write_rd_csv

FIX = Path(__file__).parent / "fixtures"
CLIP, WEIGHTS = FIX / "clip16.y4m", FIX / "toy.gvwt"
GOLDEN_BS, GOLDEN_REC, GOLDEN_REPORT = FIX / "golden.givc", FIX / "golden_rec.y4m", FIX / "golden_report.csv"
ENCODE_ARGS = ["--lambda", "380", "--steps", "20", "--seed", "3"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def golden():
    text = GOLDEN_REPORT.read_text().splitlines()
    enc = rows("\n".join(text[:2]))[0]
    met = rows("\n".join(text[2:]))[0]
    return enc, met


def test_decode_golden_bitstream(capsys, tmp_path):
    code, out, err = run(capsys, "decode", GOLDEN_BS, "--weights", WEIGHTS, "--output", tmp_path / "rec.y4m")
    assert code == 0
    assert (tmp_path / "rec.y4m").read_bytes() == GOLDEN_REC.read_bytes()
    # 16 frames pad to 5 temporal tokens: 5 * K * (log2(4) + 2) with K = 20
    assert rows(out)[0]["steps"] == "400"
    assert "decode_seconds=" in err


@pytest.mark.slow
def test_encode_decode_metrics_roundtrip(capsys, tmp_path):
    bs, rec = tmp_path / "out.givc", tmp_path / "rec.y4m"
    code, out, _ = run(capsys, "encode", "--input", CLIP, "--weights", WEIGHTS, "--output", bs, *ENCODE_ARGS)
    assert code == 0
    enc = rows(out)[0]
    assert bs.read_bytes() == GOLDEN_BS.read_bytes()
    assert run(capsys, "decode", bs, "--weights", WEIGHTS, "--output", rec)[0] == 0
    code, out, _ = run(capsys, "metrics", CLIP, rec)
    met = rows(out)[0]
    g_enc, g_met = golden()
    assert abs(float(met["psnr_yuv"]) - float(g_met["psnr_yuv"])) <= 1e-6
    assert abs(float(enc["psnr"]) - float(g_enc["psnr"])) <= 1e-6
    assert enc["payload_bits"] == g_enc["payload_bits"]
    assert abs(float(enc["psnr"]) - float(met["psnr_yuv"])) <= 1e-6


def test_missing_files(capsys, tmp_path):
    code, _, err = run(capsys, "encode", "--input", tmp_path / "nope.y4m", "--weights", WEIGHTS,
                       "--output", tmp_path / "o.givc")
    assert code == 2 and "not found" in err
    assert run(capsys, "decode", tmp_path / "nope.givc", "--weights", WEIGHTS, "--output", tmp_path / "r.y4m")[0] == 2
    assert run(capsys, "metrics", CLIP, tmp_path / "nope.y4m")[0] == 2


@pytest.mark.parametrize("lam", ["0", "-5"])
def test_lambda_rejected(capsys, tmp_path, lam):
    code, _, err = run(capsys, "encode", "--input", CLIP, "--weights", WEIGHTS, "--lambda", lam,
                       "--output", tmp_path / "o.givc")
    assert code == 2 and "lambda" in err


def test_weights_mismatch_exit_3(capsys, tmp_path):
    from givic.model import GivicModel

    m = GivicModel.load(WEIGHTS)
    with torch.no_grad():
        m.denoiser.head.bias.add_(1e-3)
    m.save(tmp_path / "other.gvwt")
    code, _, err = run(capsys, "decode", GOLDEN_BS, "--weights", tmp_path / "other.gvwt", "--output", tmp_path / "r.y4m")
    assert code == 3 and "weights" in err


def test_corrupted_payload_exit_3(capsys, tmp_path):
    data = bytearray(GOLDEN_BS.read_bytes())
    data[-5] ^= 0x10
    (tmp_path / "bad.givc").write_bytes(bytes(data))
    code, _, err = run(capsys, "decode", tmp_path / "bad.givc", "--weights", WEIGHTS, "--output", tmp_path / "r.y4m")
    assert code == 3 and "offset" in err


def test_corrupted_weights_exit_3(capsys, tmp_path):
    data = bytearray(WEIGHTS.read_bytes())
    data[100] ^= 1
    (tmp_path / "bad.gvwt").write_bytes(bytes(data))
    code, _, _ = run(capsys, "decode", GOLDEN_BS, "--weights", tmp_path / "bad.gvwt", "--output", tmp_path / "r.y4m")
    assert code == 3


def test_bad_y4m_exit_2(capsys, tmp_path):
    (tmp_path / "bad.y4m").write_bytes(b"not a y4m file")
    assert run(capsys, "metrics", tmp_path / "bad.y4m", CLIP)[0] == 2


def test_metrics(capsys):
    code, out, _ = run(capsys, "metrics", CLIP, CLIP)
    assert code == 0 and rows(out)[0] == {"psnr_y": "100.000000", "psnr_u": "100.000000",
                                          "psnr_v": "100.000000", "psnr_yuv": "100.000000"}
    _, met = golden()
    code, out, _ = run(capsys, "metrics", CLIP, GOLDEN_REC)
    assert rows(out)[0] == met


@pytest.mark.parametrize("argv,steps", [
    (["--frames", "17", "--K", "20", "--token", "4,8,8"], 400),
    (["--frames", "8", "--K", "1", "--token", "4,8,8"], 10),
    (["--frames", "33", "--K", "3", "--token", "4,8,8"], 75),
])
def test_schedule_summary(capsys, argv, steps):
    code, out, err = run(capsys, "schedule", *argv, "--summary")
    assert code == 0 and int(rows(out)[0]["steps"]) == steps and f"steps={steps}" in err


def test_schedule_rows_stable(capsys):
    a = run(capsys, "schedule", "--frames", "17", "--K", "2")[1]
    b = run(capsys, "schedule", "--frames", "17", "--K", "2")[1]
    assert a == b
    table = rows(a)
    finest = [r for r in table if r["k"] == "1"]
    assert len(finest) == 5 * 8 * 8


def test_bdrate(capsys, tmp_path):
    pts = [RdPoint(r, q) for r, q in [(0.05, 30.0), (0.1, 32.5), (0.2, 35.0), (0.4, 37.2)]]
    write_rd_csv(tmp_path / "a.csv", pts)
    write_rd_csv(tmp_path / "b.csv", [RdPoint(2 * p.bitrate, p.quality) for p in pts])
    write_rd_csv(tmp_path / "c.csv", [RdPoint(0.5 * p.bitrate, p.quality) for p in pts])
    assert abs(float(rows(run(capsys, "bdrate", tmp_path / "a.csv", tmp_path / "a.csv")[1])[0]["bd_rate_percent"])) < 1e-9
    assert abs(float(rows(run(capsys, "bdrate", tmp_path / "a.csv", tmp_path / "b.csv")[1])[0]["bd_rate_percent"]) - 100) < 0.1
    assert abs(float(rows(run(capsys, "bdrate", tmp_path / "a.csv", tmp_path / "c.csv")[1])[0]["bd_rate_percent"]) + 50) < 0.05


def test_bench_hgla_small(capsys):
    code, out, _ = run(capsys, "bench-hgla", "--context-lengths", "64,128,256", "--h", "8", "--M", "2",
                       "--repeats", "1")
    assert code == 0
    lines = out.splitlines()
    assert lines[-1].startswith("# r2=")
    table = rows("\n".join(lines[:-1]))
    assert [int(r["n"]) for r in table] == [64, 128, 256]
    assert len({r["state_bytes"] for r in table}) == 1


def test_config_file_and_threads(capsys, tmp_path, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nlambda = 0\nsteps = 1\n")
    assert read_config_file(cfg) == {"lambda": "0", "steps": "1"}
    code, _, err = run(capsys, "encode", "--input", CLIP, "--weights", WEIGHTS, "--output", tmp_path / "o.givc",
                       "--config", cfg)
    assert code == 2 and "lambda" in err
    monkeypatch.setenv("GIVIC_THREADS", "1")
    before = torch.get_num_threads()
    try:
        code, _, err = run(capsys, "bench-hgla", "--context-lengths", "16,32", "--h", "8", "--M", "1",
                           "--repeats", "1", "--jobs", "3")
        assert code == 0 and torch.get_num_threads() == 1
    finally:
        torch.set_num_threads(before)


def test_bad_config_line(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("lambda 380\n")
    code, _, err = run(capsys, "encode", "--input", CLIP, "--weights", WEIGHTS, "--output", tmp_path / "o.givc",
                       "--config", cfg)
    assert code == 2 and "key = value" in err


def test_encode_logs_resolved_config(capsys, tmp_path):
    code, out, err = run(capsys, "encode", "--input", CLIP, "--weights", WEIGHTS, "--output", tmp_path / "o.givc",
                         "--steps", "0", "--lambda", "85")
    assert code == 0
    assert "[encode]" in err and "lambda=85.0" in err and "steps=0" in err
    assert list(rows(out)[0]) == ["bpp", "psnr", "psnr_y", "payload_bits", "rd_loss"]
