"""Binary PGM (P5) and PPM (P6) readers/writers, 8-bit, dependency-free.

Grayscale floats in [0, 1] map linearly to 0..255 (round-half-even via
numpy rounding). Reading divides by the file's maxval, so values written by
:func:`write_pgm` survive a round trip bit-exactly when they already lie on
the 8-bit grid.
"""

from __future__ import annotations

import numpy as np

from fuselab.errors import DatasetError


def _float_to_bytes(img: np.ndarray) -> np.ndarray:
    if img.ndim not in (2, 3):
        raise DatasetError(f"image must be rank 2 or 3, got shape {img.shape}")
    if np.min(img) < 0.0 or np.max(img) > 1.0:
        raise DatasetError(f"image values outside [0, 1]: min {np.min(img)}, max {np.max(img)}")
    return np.rint(img * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Write a (H, W) float array in [0, 1] as binary 8-bit PGM."""
    data = _float_to_bytes(np.asarray(img, dtype=np.float64))
    if data.ndim != 2:
        raise DatasetError(f"PGM image must be rank 2, got shape {img.shape}")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    """Write a (H, W, 3) float array in [0, 1] as binary 8-bit PPM."""
    data = _float_to_bytes(np.asarray(img, dtype=np.float64))
    if data.ndim != 3 or data.shape[2] != 3:
        raise DatasetError(f"PPM image must be (H, W, 3), got shape {img.shape}")
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    """Read whitespace-separated header tokens, skipping '#' comments."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(blob):
            raise DatasetError("truncated netpbm header")
        c = blob[i : i + 1]
        if c == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j : j + 1].isspace() and blob[j : j + 1] != b"#":
                j += 1
            tokens.append(blob[i:j])
            i = j
    return tokens, i + 1  # one whitespace byte separates header from raster


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, offset = _read_tokens(blob, 4)
    if tokens[0] != magic:
        raise DatasetError(f"{path}: expected {magic.decode()} file, got magic {tokens[0]!r}")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed netpbm header") from exc
    if maxval <= 0 or maxval > 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    need = w * h * channels
    raster = blob[offset : offset + need]
    if len(raster) != need:
        raise DatasetError(f"{path}: expected {need} raster bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / maxval
    return arr.reshape((h, w) if channels == 1 else (h, w, channels))


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a (H, W) float array in [0, 1]."""
    return _read_netpbm(path, b"P5", 1)


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a (H, W, 3) float array in [0, 1]."""
    return _read_netpbm(path, b"P6", 3)
