"""Container formats: the coded bitstream (.givc) and the model weights file (.gvwt).

All integers are little-endian.

Bitstream::

    "GIVC" | version u8 | flags u8 | width u16 | height u16 | frames u16
    | K u8 | L u8 | lambda_index u8 | seed u64 | weights sha256 (32 bytes)
    | L x (S_t u16, S_h u16, S_w u16, D u8)
    | L x (length u32, crc32 u32, payload bytes)

``flags`` bit 0 marks 4:4:4 chroma (otherwise 4:2:0). ``lambda_index`` is the
position in the standard lambda list or 255 for a custom value.

Weights::

    "GVWT" | version u8 | config length u32 | config JSON (utf-8)
    | tensor count u32 | per tensor: name length u16, name, ndim u8, dims u32..., f32 values
    | sha256 of everything before it (32 bytes)
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
import torch

BITSTREAM_MAGIC = b"GIVC"
BITSTREAM_VERSION = 1
WEIGHTS_MAGIC = b"GVWT"
WEIGHTS_VERSION = 1
LAMBDAS = (85.0, 170.0, 380.0, 840.0, 1024.0)
CUSTOM_LAMBDA = 255

_HEADER = struct.Struct("<4sBBHHHBBBQ32s")
_SHAPE = struct.Struct("<HHHB")
_SEG = struct.Struct("<II")


class BitstreamError(ValueError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class WeightsError(ValueError):
    pass


def lambda_index(lam: float) -> int:
    for i, v in enumerate(LAMBDAS):
        if abs(v - lam) < 1e-9:
            return i
    return CUSTOM_LAMBDA


@dataclass
class Bitstream:
    width: int
    height: int
    frames: int
    K: int
    seed: int
    weights_hash: bytes
    shapes: List[Tuple[int, int, int, int]]
    payloads: List[bytes]
    lambda_index: int = CUSTOM_LAMBDA
    chroma: str = "420"
    version: int = BITSTREAM_VERSION

    @property
    def L(self) -> int:
        return len(self.shapes)

    def header_bytes(self) -> int:
        return _HEADER.size + _SHAPE.size * self.L + _SEG.size * self.L

    def payload_bits(self) -> int:
        return 8 * sum(len(p) for p in self.payloads)

    def total_bits(self) -> int:
        return 8 * self.header_bytes() + self.payload_bits()

    def to_bytes(self) -> bytes:
        if len(self.payloads) != self.L:
            raise ValueError("one payload per latent level required")
        flags = 1 if self.chroma == "444" else 0
        out = bytearray(_HEADER.pack(BITSTREAM_MAGIC, self.version, flags, self.width, self.height,
                                     self.frames, self.K, self.L, self.lambda_index, self.seed,
                                     self.weights_hash))
        for s in self.shapes:
            out += _SHAPE.pack(*s)
        for p in self.payloads:
            out += _SEG.pack(len(p), zlib.crc32(p)) + p
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size:
            raise BitstreamError("truncated header", len(data))
        magic, ver, flags, w, h, f, K, L, li, seed, wh = _HEADER.unpack_from(data, 0)
        if magic != BITSTREAM_MAGIC:
            raise BitstreamError("bad magic", 0)
        if ver != BITSTREAM_VERSION:
            raise BitstreamError(f"unsupported version {ver}", 4)
        pos = _HEADER.size
        shapes = []
        for _ in range(L):
            if pos + _SHAPE.size > len(data):
                raise BitstreamError("truncated shape table", pos)
            shapes.append(_SHAPE.unpack_from(data, pos))
            pos += _SHAPE.size
        payloads = []
        for _ in range(L):
            if pos + _SEG.size > len(data):
                raise BitstreamError("truncated segment header", pos)
            n, crc = _SEG.unpack_from(data, pos)
            pos += _SEG.size
            if pos + n > len(data):
                raise BitstreamError("truncated payload", pos)
            p = data[pos:pos + n]
            if zlib.crc32(p) != crc:
                raise BitstreamError("payload checksum mismatch", pos)
            payloads.append(p)
            pos += n
        if pos != len(data):
            raise BitstreamError("trailing bytes after last payload", pos)
        return cls(w, h, f, K, seed, wh, shapes, payloads, li, "444" if flags & 1 else "420", ver)


# -- weights -----------------------------------------------------------------------

def dump_weights(config: dict, tensors: Dict[str, torch.Tensor]) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    out = bytearray(WEIGHTS_MAGIC + struct.pack("<BI", WEIGHTS_VERSION, len(cfg)) + cfg)
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        t = tensors[name].detach().to(torch.float32).contiguous()
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<B", t.dim())
        out += struct.pack(f"<{t.dim()}I", *t.shape)
        out += t.numpy().astype("<f4").tobytes()
    out += hashlib.sha256(out).digest()
    return bytes(out)


def load_weights(data: bytes):
    """Parse a weights file; returns (config, tensors, sha256 of the whole file)."""
    if len(data) < 4 + 5 + 32 or data[:4] != WEIGHTS_MAGIC:
        raise WeightsError("not a GVWT weights file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise WeightsError("weights content hash mismatch")
    ver, n = struct.unpack_from("<BI", data, 4)
    if ver != WEIGHTS_VERSION:
        raise WeightsError(f"unsupported weights version {ver}")
    pos = 9
    config = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        (nd,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{nd}I", data, pos)
        pos += 4 * nd
        cnt = int(np.prod(dims)) if nd else 1
        arr = np.frombuffer(data, dtype="<f4", count=cnt, offset=pos).reshape(dims)
        pos += 4 * cnt
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(body):
        raise WeightsError("trailing bytes in weights file")
    return config, tensors, hashlib.sha256(data).digest()
