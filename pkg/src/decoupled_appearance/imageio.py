"""PFM (float) and PNG (8-bit) image files."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path, image) -> None:
    """Write a float image as little-endian PFM (rows stored bottom to top).

    ``(H, W)`` arrays become greyscale ``Pf`` files, ``(H, W, 3)`` colour ``PF``.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    elif img.ndim == 2:
        tag = b"Pf"
    else:
        raise ValueError(f"PFM holds (H, W) or (H, W, 3) images, got {img.shape}")
    h, w = img.shape[:2]
    data = np.ascontiguousarray(np.flipud(img), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(tag + b"\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(data.tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a float32 array (top row first)."""
    with open(path, "rb") as fh:
        tag = fh.readline().rstrip()
        if tag == b"PF":
            channels = 3
        elif tag == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file")
        dims = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", fh.readline())
        if not dims:
            raise ValueError(f"{path}: malformed PFM header")
        w, h = int(dims.group(1)), int(dims.group(2))
        scale = float(fh.readline().strip())
        endian = "<" if scale < 0 else ">"
        count = w * h * channels
        data = np.frombuffer(fh.read(4 * count), dtype=endian + "f4")
    if data.size != count:
        raise ValueError(f"{path}: truncated PFM data")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_png(path, image) -> None:
    """Clamp to [0, 1] and write an 8-bit PNG."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(path)


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def read_image(path) -> np.ndarray:
    """Float64 image from a ``.pfm`` or ``.png`` path."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path).astype(np.float64)
    return read_png(path)

