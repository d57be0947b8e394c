"""Synthetic dermatoscopy-like fixture datasets for dry runs and tests.

Each image is a noisy skin-toned background with one elliptical lesion whose
colour depends on the class, so both the segmenter and the classifier have
something learnable. A few HAM-style images get a second blob, which mask QC
should reject.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image

from .data import CLASSES

HAM_FIXTURE_COUNTS = {"akiec": 3, "bcc": 4, "bkl": 4, "df": 2, "mel": 8, "nv": 8, "vasc": 3}

# mean RGB of each lesion class
_LESION_RGB = {
    "akiec": (170, 90, 80),
    "bcc": (200, 140, 150),
    "bkl": (140, 110, 70),
    "df": (120, 80, 60),
    "mel": (50, 30, 30),
    "nv": (110, 70, 45),
    "vasc": (170, 30, 50),
}


def lesion_image(rng, size=(60, 80), cls="nv", second_blob=False, hair=True):
    """Return ``(image uint8 HxWx3, mask uint8 HxW)``."""
    h, w = size
    yy, xx = np.mgrid[:h, :w]
    skin = np.array([225, 180, 160], dtype=float) + rng.normal(0, 6, 3)
    img = np.broadcast_to(skin, (h, w, 3)) + rng.normal(0, 8, (h, w, 3))
    cy, cx = rng.uniform(0.35, 0.65) * h, rng.uniform(0.35, 0.65) * w
    ry, rx = rng.uniform(0.15, 0.28) * h, rng.uniform(0.15, 0.28) * w
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    colour = np.array(_LESION_RGB[cls], dtype=float) + rng.normal(0, 5, 3)
    img[mask] = colour + rng.normal(0, 10, (mask.sum(), 3))
    if second_blob:
        by, bx = 0.15 * h, 0.12 * w
        blob = ((yy - by) / (0.1 * h)) ** 2 + ((xx - bx) / (0.08 * w)) ** 2 <= 1.0
        img[blob] = colour
        mask = mask | blob
    if hair:
        for _ in range(rng.integers(0, 3)):
            x0 = rng.integers(0, w)
            slope = rng.uniform(-0.5, 0.5)
            ys = np.arange(h)
            xs = np.clip((x0 + slope * ys).astype(int), 0, w - 1)
            img[ys, xs] = (40, 30, 25)
    return np.clip(img, 0, 255).astype(np.uint8), mask.astype(np.uint8)


def make_fixture(root, *, n_isic=32, ham_counts=None, size=(60, 80), seed=0, multi_blob_ids=2):
    """Write ``isic2018/`` and ``ham10000/`` fixture trees under ``root``; returns paths."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    ham_counts = HAM_FIXTURE_COUNTS if ham_counts is None else ham_counts

    isic = root / "isic2018"
    (isic / "images").mkdir(parents=True, exist_ok=True)
    (isic / "masks").mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n_isic):
        iid = f"ISIC_{i:07d}"
        cls = CLASSES[i % len(CLASSES)]
        img, mask = lesion_image(rng, size, cls)
        Image.fromarray(img).save(isic / "images" / f"{iid}.jpg", quality=95)
        Image.fromarray(mask * 255).save(isic / "masks" / f"{iid}_segmentation.png")
        ids.append(iid)
    pd.DataFrame({"image_id": ids}).to_csv(isic / "metadata.csv", index=False)

    ham = root / "ham10000"
    (ham / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    n = 0
    for cls in CLASSES:
        for _ in range(ham_counts.get(cls, 0)):
            iid = f"ISIC_{1000000 + n:07d}"
            img, _ = lesion_image(rng, size, cls, second_blob=n < multi_blob_ids)
            Image.fromarray(img).save(ham / "images" / f"{iid}.jpg", quality=95)
            rows.append({"lesion_id": f"HAM_{n:07d}", "image_id": iid, "dx": cls})
            n += 1
    pd.DataFrame(rows).to_csv(ham / "HAM10000_metadata.csv", index=False)
    return {"isic_root": isic, "isic_metadata": isic / "metadata.csv",
            "ham_root": ham, "ham_metadata": ham / "HAM10000_metadata.csv"}
