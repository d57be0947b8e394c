"""Image and mask file I/O, plus atomic writes."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image


def read_image(path):
    """Decode ``path`` to an ``(H, W, 3)`` uint8 RGB array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_mask(path):
    """Decode a single-channel mask file to {0, 1} uint8 (any nonzero pixel is foreground)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _png_bytes(arr):
    import io

    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def write_mask(path, mask):
    """Write a {0, 1} mask as a {0, 255} single-channel PNG."""
    arr = (np.asarray(mask, dtype=np.uint8) > 0).astype(np.uint8) * 255
    atomic_write_bytes(path, _png_bytes(arr))


def write_png(path, image):
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise TypeError(f"PNG cache expects uint8, got {arr.dtype}")
    atomic_write_bytes(path, _png_bytes(arr))
