"""Float (PFM) and 8-bit (PNG) image writing plus PFM reading.

Both writers are implemented directly over struct/zlib so outputs are
byte-deterministic, which the run manifest relies on. PFM follows the
standard little-endian, bottom-up scanline layout.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ContractError


def write_pfm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        header = b"Pf"
        h, w = image.shape
    elif image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
        h, w = image.shape[:2]
    else:
        raise ContractError(f"pfm: expected (H,W) or (H,W,3), got {image.shape}")
    data = np.flipud(image)  # bottom-up scanlines
    if data.dtype.byteorder == ">":
        data = data.astype("<f4")
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ContractError(f"pfm: bad magic {kind!r}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h * (3 if kind == b"PF" else 1)
        raw = f.read(count * 4)
    if len(raw) != count * 4:
        raise ContractError("pfm: truncated payload")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(raw, dtype=dtype).astype(np.float32)
    shape = (h, w, 3) if kind == b"PF" else (h, w)
    return np.flipud(arr.reshape(shape)).copy()


def write_png(path, image: np.ndarray) -> None:
    """8-bit RGB PNG; float inputs are clamped from [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"png: expected (H,W[,3]), got {image.shape}")
    if img.dtype != np.uint8:
        img = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = img.shape[:2]

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (
            struct.pack(">I", len(payload))
            + tag
            + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
        )

    raw = b"".join(b"\x00" + img[y].tobytes() for y in range(h))
    out = b"\x89PNG\r\n\x1a\n"
    out += chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0))
    out += chunk(b"IDAT", zlib.compress(raw, 9))
    out += chunk(b"IEND", b"")
    Path(path).write_bytes(out)
