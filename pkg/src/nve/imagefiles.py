"""Binary Netpbm readers/writers (P6 PPM for RGB, P5 PGM for grayscale).

16-bit PGM samples are big-endian per the Netpbm convention.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit RGB image, float [3,H,W] in [0,1] or uint8 [3,H,W]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    _, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read P6 into float64 [3,H,W] in [0,1]."""
    w, h, maxval, body = _read_pnm(path, b"P6")
    data = np.frombuffer(body, dtype=np.uint8, count=w * h * 3)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray, bits: int = 8) -> None:
    """Grayscale image from float [H,W] in [0,1]; bits is 8 or 16."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected [H,W] image, got {image.shape}")
    maxval = (1 << bits) - 1
    quant = np.clip(np.round(image * maxval), 0, maxval)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        if bits == 8:
            fh.write(quant.astype(np.uint8).tobytes())
        elif bits == 16:
            fh.write(quant.astype(">u2").tobytes())
        else:
            raise ValueError("bits must be 8 or 16")


def read_pgm(path) -> np.ndarray:
    """Read P5 into float64 [H,W] in [0,1]."""
    w, h, maxval, body = _read_pnm(path, b"P5")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(body, dtype=dtype, count=w * h)
    return data.reshape(h, w).astype(np.float64) / maxval


def _read_pnm(path, magic: bytes):
    raw = Path(path).read_bytes()
    if not raw.startswith(magic):
        raise ValueError(f"{path}: expected {magic.decode()} file")
    # header = magic, width, height, maxval separated by whitespace
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    return w, h, maxval, raw[pos:]
