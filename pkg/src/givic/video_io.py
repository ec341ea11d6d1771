"""Y4M ingestion/emission, YUV tensors and quality metrics (PSNR, BD-rate)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np
import torch
from scipy.interpolate import PchipInterpolator

PSNR_CAP = 100.0
_MAGIC = b"YUV4MPEG2"


class Y4MError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class NoOverlapError(ValueError):
    pass


@dataclass
class RawClip:
    width: int
    height: int
    chroma: str  # "420" or "444"
    planes: List[tuple]  # per frame: (Y, U, V) uint8 arrays
    header_params: List[str] = field(default_factory=list)
    frame_params: List[bytes] = field(default_factory=list)

    def __post_init__(self):
        if self.chroma not in ("420", "444"):
            raise ValueError(f"unsupported chroma format {self.chroma!r}")
        if not self.planes:
            raise ValueError("a clip needs at least one frame")
        cw, ch = self.chroma_size
        for y, u, v in self.planes:
            if y.shape != (self.height, self.width) or u.shape != (ch, cw) or v.shape != (ch, cw):
                raise ValueError("plane sizes inconsistent with chroma format")
        if not self.frame_params:
            self.frame_params = [b""] * len(self.planes)

    @property
    def frames(self) -> int:
        return len(self.planes)

    @property
    def bit_depth(self) -> int:
        return 8

    @property
    def chroma_size(self):
        if self.chroma == "444":
            return self.width, self.height
        return (self.width + 1) // 2, (self.height + 1) // 2

    @property
    def pixels(self) -> int:
        return self.width * self.height * self.frames


def _chroma_tag(tag: str) -> str:
    if tag == "C444":
        return "444"
    if tag.startswith("C420"):
        return "420"
    raise ValueError(f"unsupported chroma tag {tag}")


def parse_y4m(data: bytes) -> RawClip:
    nl = data.find(b"\n")
    if nl < 0 or not data.startswith(_MAGIC):
        raise Y4MError("missing YUV4MPEG2 header", 0)
    params = data[len(_MAGIC):nl].decode("ascii").split()
    width = height = None
    chroma = "420"
    for p in params:
        if p[0] == "W":
            width = int(p[1:])
        elif p[0] == "H":
            height = int(p[1:])
        elif p[0] == "C":
            try:
                chroma = _chroma_tag(p)
            except ValueError as exc:
                raise Y4MError(str(exc), 0) from None
    if not width or not height:
        raise Y4MError("header lacks W/H", 0)
    clip_params = params
    if chroma == "444":
        cw, ch = width, height
    else:
        cw, ch = (width + 1) // 2, (height + 1) // 2
    frame_bytes = width * height + 2 * cw * ch
    pos = nl + 1
    planes, fparams = [], []
    while pos < len(data):
        if not data.startswith(b"FRAME", pos):
            raise Y4MError("expected FRAME marker", pos)
        eol = data.find(b"\n", pos)
        if eol < 0:
            raise Y4MError("unterminated FRAME header", pos)
        fparams.append(data[pos + 5:eol])
        start = eol + 1
        if start + frame_bytes > len(data):
            raise Y4MError("truncated frame", start)
        buf = np.frombuffer(data, dtype=np.uint8, count=frame_bytes, offset=start)
        y = buf[: width * height].reshape(height, width).copy()
        u = buf[width * height: width * height + cw * ch].reshape(ch, cw).copy()
        v = buf[width * height + cw * ch:].reshape(ch, cw).copy()
        planes.append((y, u, v))
        pos = start + frame_bytes
    if not planes:
        raise Y4MError("no frames", pos)
    return RawClip(width, height, chroma, planes, clip_params, fparams)


def read_y4m(path) -> RawClip:
    return parse_y4m(Path(path).read_bytes())


def dump_y4m(clip: RawClip) -> bytes:
    params = list(clip.header_params)
    if not params:
        tag = "C444" if clip.chroma == "444" else "C420jpeg"
        params = [f"W{clip.width}", f"H{clip.height}", "F25:1", "Ip", "A1:1", tag]
    out = bytearray(_MAGIC + b" " + " ".join(params).encode("ascii") + b"\n")
    for (y, u, v), fp in zip(clip.planes, clip.frame_params):
        out += b"FRAME" + fp + b"\n"
        out += y.tobytes() + u.tobytes() + v.tobytes()
    return bytes(out)


def write_y4m(path, clip: RawClip) -> None:
    Path(path).write_bytes(dump_y4m(clip))


# -- tensors -------------------------------------------------------------------

def _upsample2_bilinear(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """2x bilinear upsampling with half-pixel centres and edge clamping."""

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w = src - i0
        return i0, i1, w

    r0, r1, wr = axis_weights(plane.shape[0], out_h)
    c0, c1, wc = axis_weights(plane.shape[1], out_w)
    p = plane.astype(np.float64)
    rows = p[r0] * (1 - wr)[:, None] + p[r1] * wr[:, None]
    return rows[:, c0] * (1 - wc)[None, :] + rows[:, c1] * wc[None, :]


def to_video_tensor(clip: RawClip, dtype=torch.float32) -> torch.Tensor:
    """T x H x W x 3 tensor of YUV in [0, 1]; 4:2:0 chroma upsampled to 4:4:4."""
    frames = []
    for y, u, v in clip.planes:
        if clip.chroma == "420":
            u = _upsample2_bilinear(u, clip.height, clip.width)
            v = _upsample2_bilinear(v, clip.height, clip.width)
        frames.append(np.stack([y.astype(np.float64), u.astype(np.float64), v.astype(np.float64)], -1))
    return torch.from_numpy(np.stack(frames) / 255.0).to(dtype)


def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def _downsample2_mean(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ph, pw = h + (h % 2), w + (w % 2)
    p = np.pad(plane, ((0, ph - h), (0, pw - w)), mode="edge")
    return p.reshape(ph // 2, 2, pw // 2, 2).mean(axis=(1, 3))


def from_video_tensor(x: torch.Tensor, chroma: str = "420", header_params=None) -> RawClip:
    a = x.detach().to(torch.float64).clamp(0, 1).numpy()
    t, h, w, _ = a.shape
    planes = []
    for f in range(t):
        y = _to_u8(a[f, :, :, 0])
        u, v = a[f, :, :, 1], a[f, :, :, 2]
        if chroma == "420":
            u, v = _downsample2_mean(u), _downsample2_mean(v)
        planes.append((y, _to_u8(u), _to_u8(v)))
    params = None
    if header_params:
        params = [p for p in header_params if p[0] not in "WHC"]
        tag = "C444" if chroma == "444" else "C420jpeg"
        params = [f"W{w}", f"H{h}"] + params + [tag]
    return RawClip(w, h, chroma, planes, params or [])


# -- metrics -------------------------------------------------------------------

def _psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))


def psnr_yuv(ref: RawClip, rec: RawClip) -> dict:
    """Per-plane PSNR (MAX=255, capped at 100 dB) and the 6:1:1 weighted YUV value."""
    if (ref.width, ref.height, ref.frames, ref.chroma) != (rec.width, rec.height, rec.frames, rec.chroma):
        raise ValueError("clips differ in dimensions or chroma format")
    out = {}
    for idx, name in enumerate("yuv"):
        a = np.stack([p[idx] for p in ref.planes])
        b = np.stack([p[idx] for p in rec.planes])
        out[name] = _psnr(a, b)
    out["yuv"] = (6 * out["y"] + out["u"] + out["v"]) / 8
    return out


def psnr_tensor(ref: torch.Tensor, rec: torch.Tensor) -> float:
    mse = torch.mean((ref.double() - rec.double()) ** 2).item()
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


@dataclass(frozen=True)
class RdPoint:
    bitrate: float  # bits per pixel
    quality: float  # dB

    def __post_init__(self):
        if not self.bitrate > 0:
            raise ValueError("bitrate must be positive")


def _curve(points: Sequence[RdPoint]):
    if len(points) < 4:
        raise ValueError("BD-rate needs at least 4 points per curve")
    pts = sorted(points, key=lambda p: p.quality)
    q = np.array([p.quality for p in pts])
    if np.any(np.diff(q) <= 0):
        raise ValueError("quality values must be strictly monotone")
    r = np.log(np.array([p.bitrate for p in pts]))
    return q, r


def bd_rate(anchor: Sequence[RdPoint], test: Sequence[RdPoint]) -> float:
    """Bjontegaard delta rate (percent) with PCHIP interpolation of log-rate over quality."""
    qa, ra = _curve(anchor)
    qt, rt = _curve(test)
    lo, hi = max(qa[0], qt[0]), min(qa[-1], qt[-1])
    if not hi > lo:
        raise NoOverlapError("RD curves have no overlapping quality interval")
    fa, ft = PchipInterpolator(qa, ra), PchipInterpolator(qt, rt)
    avg = (ft.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo)
    return (math.exp(avg) - 1.0) * 100.0


def read_rd_csv(path) -> List[RdPoint]:
    with open(path, newline="") as fh:
        return [RdPoint(float(row["bpp"]), float(row["psnr"])) for row in csv.DictReader(fh)]


def write_rd_csv(path, points: Iterable[RdPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bpp", "psnr"])
        for p in points:
            w.writerow([repr(p.bitrate), repr(p.quality)])
