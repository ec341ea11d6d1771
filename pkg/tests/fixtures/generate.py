"""Regenerate the golden CLI fixtures from the bundled toy weights.

    python3 tests/fixtures/generate.py [--train]

``--train`` first retrains ``toy.gvwt`` (several minutes). The golden files
are outputs of this artifact, so regenerate them whenever the codec changes.
"""

import argparse
import contextlib
import io
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
CLIP = HERE / "clip16.y4m"
WEIGHTS = HERE / "toy.gvwt"
BITSTREAM = HERE / "golden.givc"
REC = HERE / "golden_rec.y4m"
REPORT = HERE / "golden_report.csv"
ENCODE_ARGS = ["--lambda", "380", "--steps", "20", "--seed", "3"]
TRAIN_ARGS = ["--clips", "32", "--steps", "800,300,300", "--seed", "0", "--data-seed", "1"]


def run(argv):
    from givic.cli import main

    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(argv)
    if code:
        raise SystemExit(f"givic {' '.join(argv)} exited with {code}")
    return buf.getvalue()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--train", action="store_true")
    args = ap.parse_args()
    from givic.training import moving_gradient_clip
    from givic.video_io import from_video_tensor, write_y4m

    if args.train:
        run(["train", "--output", str(WEIGHTS), *TRAIN_ARGS])
    write_y4m(CLIP, from_video_tensor(moving_gradient_clip(16, 32, 32, speed=0.75), "420"))
    enc = run(["encode", "--input", str(CLIP), "--weights", str(WEIGHTS), "--output", str(BITSTREAM), *ENCODE_ARGS])
    run(["decode", str(BITSTREAM), "--weights", str(WEIGHTS), "--output", str(REC)])
    metrics = run(["metrics", str(CLIP), str(REC)])
    REPORT.write_text(enc + metrics)
    sys.stdout.write(REPORT.read_text())


if __name__ == "__main__":
    main()
