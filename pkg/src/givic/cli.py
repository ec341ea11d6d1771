"""Command-line interface: ``givic encode|decode|metrics|schedule|bdrate|bench-hgla|train``."""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

import torch

EXIT_OK, EXIT_USAGE, EXIT_CORRUPT = 0, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _threads(args) -> None:
    env = os.environ.get("GIVIC_THREADS")
    n = int(env) if env else getattr(args, "jobs", None)
    if n:
        torch.set_num_threads(max(1, int(n)))


def _require(path: Optional[str], what: str) -> Path:
    if path is None:
        raise CliError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {path}")
    return p


def read_config_file(path) -> dict:
    """key = value lines; '#' starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _log_config(name: str, values: dict) -> None:
    items = " ".join(f"{k}={values[k]}" for k in sorted(values))
    print(f"[{name}] {items}", file=sys.stderr)


def _csv(rows, header=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -- commands -----------------------------------------------------------------------

def cmd_encode(args) -> int:
    from .codec import CodecConfig, encode
    from .model import GivicModel
    from .video_io import from_video_tensor, psnr_yuv, read_y4m, to_video_tensor

    if args.config:
        for k, v in read_config_file(_require(args.config, "config file")).items():
            if k in ("lambda", "lam"):
                args.lam = float(v)
            elif k in ("steps", "seed", "jobs"):
                setattr(args, k, int(v))
            elif k == "lr":
                args.lr = float(v)
    if not args.lam > 0:
        raise CliError("--lambda must be positive")
    src = _require(args.input, "input clip")
    wpath = _require(args.weights, "weights file")
    _threads(args)
    _log_config("encode", {"input": src, "weights": wpath, "lambda": args.lam, "steps": args.steps,
                           "seed": args.seed, "lr": args.lr, "output": args.output,
                           "threads": torch.get_num_threads()})
    clip = read_y4m(src)
    model = GivicModel.load(wpath)
    X = to_video_tensor(clip)
    res = encode(X, model, CodecConfig(lam=args.lam, steps=args.steps, lr=args.lr, seed=args.seed),
                 chroma=clip.chroma, log=lambda s: print(s, file=sys.stderr) if args.verbose else None)
    data = res.bitstream.to_bytes()
    Path(args.output).write_bytes(data)
    from .codec import decode
    rec = from_video_tensor(decode(res.bitstream, model), clip.chroma)
    q = psnr_yuv(clip, rec)
    bpp = 8 * len(data) / clip.pixels
    sys.stdout.write(_csv([[f"{bpp:.6f}", f"{q['yuv']:.6f}", f"{q['y']:.6f}", res.bitstream.payload_bits(),
                            f"{res.report.loss:.6f}"]],
                          ["bpp", "psnr", "psnr_y", "payload_bits", "rd_loss"]))
    return EXIT_OK


def cmd_decode(args) -> int:
    from .bitstream import Bitstream
    from .codec import decode
    from .model import GivicModel
    from .video_io import from_video_tensor, write_y4m

    src = _require(args.input, "bitstream")
    wpath = _require(args.weights, "weights file")
    _threads(args)
    _log_config("decode", {"input": src, "weights": wpath, "output": args.output,
                           "threads": torch.get_num_threads()})
    model = GivicModel.load(wpath)
    bs = Bitstream.from_bytes(src.read_bytes())
    t0 = time.perf_counter()
    rec, info = decode(bs, model, return_info=True)
    dt = time.perf_counter() - t0
    write_y4m(args.output, from_video_tensor(rec, bs.chroma))
    # wall time goes to stderr so that stdout stays byte-stable across runs
    print(f"decode_seconds={dt:.3f}", file=sys.stderr)
    sys.stdout.write(_csv([[info.steps_executed]], ["steps"]))
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .video_io import psnr_yuv, read_y4m

    a = read_y4m(_require(args.reference, "reference clip"))
    b = read_y4m(_require(args.reconstruction, "reconstructed clip"))
    q = psnr_yuv(a, b)
    sys.stdout.write(_csv([[f"{q['y']:.6f}", f"{q['u']:.6f}", f"{q['v']:.6f}", f"{q['yuv']:.6f}"]],
                          ["psnr_y", "psnr_u", "psnr_v", "psnr_yuv"]))
    return EXIT_OK


def cmd_schedule(args) -> int:
    from .pyramid import PyramidConfig
    from .tokenizer import TokenGeometry, build_schedule

    geom = TokenGeometry(*args.token)
    sched = build_schedule(args.frames, args.height, args.width, geom, args.K, PyramidConfig(args.K))
    if args.summary:
        sys.stdout.write(_csv([[len(sched), sched.n_levels]], ["steps", "temporal_levels"]))
    else:
        sys.stdout.write(_csv(sched.to_csv_rows(), ["step", "k", "level", "i", "d", "u", "v", "pos"]))
    print(f"steps={len(sched)}", file=sys.stderr)
    return EXIT_OK


def cmd_bdrate(args) -> int:
    from .video_io import bd_rate, read_rd_csv

    a = read_rd_csv(_require(args.anchor, "anchor curve"))
    t = read_rd_csv(_require(args.test, "test curve"))
    sys.stdout.write(_csv([[f"{bd_rate(a, t):.6f}"]], ["bd_rate_percent"]))
    return EXIT_OK


def cmd_bench_hgla(args) -> int:
    from .hgla import HGLA, bench, linear_fit_r2

    _threads(args)
    torch.manual_seed(args.seed)
    model = HGLA(args.h, args.M)
    rows = bench(model, args.context_lengths, args.mode, repeats=args.repeats, seed=args.seed)
    sys.stdout.write(_csv([[r.n, f"{r.seconds:.6f}", r.state_bytes] for r in rows],
                          ["n", "seconds", "state_bytes"]))
    r2 = linear_fit_r2([r.n for r in rows], [r.seconds for r in rows])
    ratios = [b.seconds / a.seconds for a, b in zip(rows, rows[1:]) if b.n == 2 * a.n and a.seconds > 0]
    ratio = f" doubling_ratio={sum(ratios) / len(ratios):.3f}" if ratios else ""
    print(f"# r2={r2:.5f}{ratio}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, synthetic_dataset, train_toy

    _threads(args)
    cfg = TrainConfig(stage_steps=tuple(args.steps), lam=args.lam, seed=args.seed)
    data_seed = args.seed if args.data_seed is None else args.data_seed
    _log_config("train", {"clips": args.clips, "steps": args.steps, "lambda": args.lam, "seed": args.seed,
                          "data_seed": data_seed, "output": args.output})
    clips = synthetic_dataset(args.clips, seed=data_seed)
    model, logs = train_toy(clips, cfg, log=lambda s: print(s, file=sys.stderr))
    model.save(args.output)
    rows = [[s, *(f"{v:.6f}" for v in log.smoothed())] for s, log in logs.items()]
    sys.stdout.write(_csv(rows, ["stage", "loss_start", "loss_end"]))
    return EXIT_OK


def _int_list(s: str) -> List[int]:
    return [int(v) for v in s.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="givic", description="Desk-scale generative implicit video codec")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("encode", help="encode a Y4M clip")
    e.add_argument("--input", required=True)
    e.add_argument("--weights", required=True)
    e.add_argument("--lambda", dest="lam", type=float, default=380.0)
    e.add_argument("--steps", type=int, default=500)
    e.add_argument("--lr", type=float, default=0.05)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--output", required=True)
    e.add_argument("--config")
    e.add_argument("--jobs", type=int)
    e.add_argument("--verbose", action="store_true")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decode a bitstream to Y4M")
    d.add_argument("input")
    d.add_argument("--weights", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--jobs", type=int)
    d.set_defaults(func=cmd_decode)

    m = sub.add_parser("metrics", help="PSNR between two Y4M clips")
    m.add_argument("reference")
    m.add_argument("reconstruction")
    m.set_defaults(func=cmd_metrics)

    s = sub.add_parser("schedule", help="print the decode schedule")
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--K", type=int, default=20)
    s.add_argument("--token", type=_int_list, default=[4, 8, 8])
    s.add_argument("--summary", action="store_true")
    s.set_defaults(func=cmd_schedule)

    b = sub.add_parser("bdrate", help="BD-rate between two RD curves (CSV with bpp,psnr)")
    b.add_argument("anchor")
    b.add_argument("test")
    b.set_defaults(func=cmd_bdrate)

    h = sub.add_parser("bench-hgla", help="HGLA wall time versus context length")
    h.add_argument("--context-lengths", type=_int_list, default=[1024, 2048, 4096, 8192, 16384])
    h.add_argument("--mode", choices=["recurrent", "chunked"], default="recurrent")
    h.add_argument("--h", type=int, default=16)
    h.add_argument("--M", type=int, default=4)
    h.add_argument("--repeats", type=int, default=3)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--jobs", type=int)
    h.set_defaults(func=cmd_bench_hgla)

    t = sub.add_parser("train", help="toy three-stage pretraining on synthetic clips")
    t.add_argument("--output", required=True)
    t.add_argument("--clips", type=int, default=32)
    t.add_argument("--steps", type=_int_list, default=[1500, 600, 600])
    t.add_argument("--lambda", dest="lam", type=float, default=85.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data-seed", type=int, help="seed of the synthetic clip set (defaults to --seed)")
    t.add_argument("--jobs", type=int)
    t.set_defaults(func=cmd_train)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    from .bitstream import BitstreamError, WeightsError
    from .codec import WeightsMismatchError
    from .rangecoder import CorruptPayloadError
    from .video_io import Y4MError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"givic: error: {exc}", file=sys.stderr)
        return exc.code
    except (WeightsMismatchError, BitstreamError, CorruptPayloadError, WeightsError) as exc:
        print(f"givic: error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (Y4MError, ValueError) as exc:
        print(f"givic: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
