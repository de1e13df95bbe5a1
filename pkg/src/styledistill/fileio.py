"""Small binary formats shared across the toolchain.

Images travel as binary PPM (P6, 8-bit). Tensors use the ".ten" container:
magic "TEN1", u32 rank, u32 dims[rank], little-endian f32 payload.
Digests are 64-bit FNV-1a, used for reproducibility checks only.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def digest_file(path) -> str:
    return f"{fnv1a64(Path(path).read_bytes()):016x}"


def digest_array(arr: np.ndarray) -> str:
    return f"{fnv1a64(np.ascontiguousarray(arr).tobytes()):016x}"


def write_ten(path, arr: np.ndarray) -> None:
    a = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(b"TEN1")
        f.write(struct.pack("<I", a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_ten(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != b"TEN1":
        raise ValueError(f"not a TEN1 tensor file: {path}")
    (rank,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    if payload.size != count:
        raise ValueError(f"truncated tensor file: {path}")
    return payload.astype(np.float64).reshape(dims)


def _read_ppm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(data):
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM into a (3, H, W) float array in [0, 1]."""
    data = Path(path).read_bytes()
    magic, pos = _read_ppm_token(data, 0)
    if magic != b"P6":
        raise ValueError(f"not a binary PPM (P6) file: {path}")
    w_tok, pos = _read_ppm_token(data, pos)
    h_tok, pos = _read_ppm_token(data, pos)
    max_tok, pos = _read_ppm_token(data, pos)
    width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
    if pixels.size != width * height * 3:
        raise ValueError(f"truncated PPM payload: {path}")
    img = pixels.reshape(height, width, 3).transpose(2, 0, 1)
    return img.astype(np.float64) / 255.0


def write_ppm(path, img: np.ndarray) -> None:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError("image must have shape (3, H, W)")
    quantized = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    h, w = a.shape[1], a.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(quantized.transpose(1, 2, 0).tobytes())
