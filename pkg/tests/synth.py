"""Small synthetic image sets for overfit and shape tests."""

import numpy as np


def disk_set(n, size=(32, 32), seed=0):
    """``n`` noisy images with one dark disk each, and the matching masks."""
    rng = np.random.default_rng(seed)
    h, w = size
    yy, xx = np.mgrid[:h, :w]
    images, masks = [], []
    for _ in range(n):
        cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
        r = rng.uniform(0.15, 0.3) * min(h, w)
        m = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)
        img = np.full((h, w, 3), 210.0) + rng.normal(0, 10, (h, w, 3))
        img[m.astype(bool)] = (60, 40, 30) + rng.normal(0, 10, (int(m.sum()), 3))
        images.append(np.clip(img, 0, 255).astype(np.uint8))
        masks.append(m)
    return images, masks


def colour_set(n, size=32, seed=0):
    """``n`` images split evenly between two lesion colours, labels ``a``/``b``."""
    rng = np.random.default_rng(seed)
    X, y = [], []
    for i in range(n):
        label = "ab"[i % 2]
        base = (200, 60, 60) if label == "a" else (60, 60, 200)
        X.append(np.clip(np.array(base) + rng.normal(0, 20, (size, size, 3)), 0, 255).astype(np.uint8))
        y.append(label)
    return np.stack(X), np.array(y)
