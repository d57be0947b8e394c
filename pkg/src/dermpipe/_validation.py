"""Input validation helpers shared by the estimators and pipeline stages."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.exceptions import NotFittedError


def check_image(image, *, name="image"):
    """Return ``image`` as an ``(H, W, 3)`` float64 array.

    Grayscale 2-D input is broadcast to three channels; a trailing alpha
    channel is dropped.
    """
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise ValueError(f"{name} must be HxWx3, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} is empty")
    if not np.issubdtype(arr.dtype, np.number):
        raise TypeError(f"{name} must be numeric, got {arr.dtype}")
    arr = arr[:, :, :3].astype(np.float64, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or inf")
    return arr


def check_mask(mask, *, name="mask"):
    """Return ``mask`` as a 2-D uint8 array over {0, 1}.

    Masks stored on disk as {0, 255} are accepted and mapped to {0, 1}.
    """
    arr = np.asarray(mask)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    values = np.unique(arr)
    if np.all(np.isin(values, (0, 1))):
        return arr.astype(np.uint8)
    if np.all(np.isin(values, (0, 255))):
        return (arr == 255).astype(np.uint8)
    raise ValueError(f"{name} must be binary ({{0,1}} or {{0,255}}), found {values[:5]}")


def check_prob_map(prob_map, *, name="prob_map"):
    arr = np.asarray(prob_map, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0 or np.isnan(arr).any()):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_fraction(value, name, *, closed_right=True, closed_left=True):
    if not isinstance(value, numbers.Real):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    lo_ok = value >= 0 if closed_left else value > 0
    hi_ok = value <= 1 if closed_right else value < 1
    if not (lo_ok and hi_ok):
        raise ValueError(f"{name}={value} outside its allowed range")
    return float(value)


def check_positive_int(value, name, *, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_image_batch(X, *, size=None, name="X"):
    """Validate a batch of equally sized images, returning ``(n, H, W, 3)`` float32.

    ``size`` is an optional ``(height, width)`` the batch must match.
    """
    if isinstance(X, np.ndarray) and X.ndim == 4:
        arr = X
    else:
        items = list(X)
        if not items:
            h, w = size if size is not None else (0, 0)
            return np.zeros((0, h, w, 3), dtype=np.float32)
        arr = np.stack([check_image(x, name=f"{name}[{i}]") for i, x in enumerate(items)])
    if arr.shape[-1] != 3:
        raise ValueError(f"{name} must have 3 channels, got shape {arr.shape}")
    if size is not None and tuple(arr.shape[1:3]) != tuple(size):
        raise ValueError(
            f"{name} has spatial size {tuple(arr.shape[1:3])}, expected {tuple(size)}"
        )
    return arr.astype(np.float32, copy=False)


def check_is_fitted(estimator, attribute):
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call 'fit' first."
        )
