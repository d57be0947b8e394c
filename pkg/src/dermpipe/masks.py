"""From probability maps to classifier-ready crops.

Order of operations: binarize -> QC -> dilate -> crop to lesion bbox ->
resize -> range normalization to [-1, 1].
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_fraction, check_mask, check_positive_int, check_prob_map
from .data import CLASSES
from .io import atomic_write_text, read_image, write_mask

logger = logging.getLogger(__name__)

ACCEPTED, REJECTED = "accepted", "rejected"
REASONS = ("ok", "multi_region", "empty_mask", "area_too_small", "area_too_large")


def binarize(prob_map, threshold=0.5):
    """Foreground where the probability is strictly greater than ``threshold``."""
    prob = check_prob_map(prob_map)
    return (prob > threshold).astype(np.uint8)


@dataclass(frozen=True)
class RegionStats:
    label: int
    area: int
    bbox: tuple[int, int, int, int]  # x_min, y_min, x_max, y_max (inclusive)
    centroid: tuple[float, float]  # x, y


def _structure(connectivity):
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def label_components(mask, connectivity=8):
    """Label image (0 = background) with labels numbered in raster-scan order."""
    labels, n = ndimage.label(check_mask(mask), structure=_structure(connectivity))
    return labels, n


def connected_components(mask, connectivity=8):
    """Statistics for every connected foreground region, in raster-scan label order."""
    labels, n = label_components(mask, connectivity)
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    areas = ndimage.sum_labels(np.ones_like(labels), labels, idx)
    centroids = ndimage.center_of_mass(np.ones_like(labels), labels, idx)
    out = []
    for lab, sl, area, (cy, cx) in zip(idx, ndimage.find_objects(labels), areas, centroids):
        ys, xs = sl
        out.append(
            RegionStats(
                label=int(lab),
                area=int(area),
                bbox=(xs.start, ys.start, xs.stop - 1, ys.stop - 1),
                centroid=(float(cx), float(cy)),
            )
        )
    return out


@dataclass(frozen=True)
class QCPolicy:
    min_area_fraction: float = 0.005
    max_area_fraction: float = 0.95
    small_component_ignore_fraction: float = 0.002
    connectivity: int = 8
    allow_multi_region: bool = False

    def __post_init__(self):
        check_fraction(self.min_area_fraction, "min_area_fraction")
        check_fraction(self.max_area_fraction, "max_area_fraction")
        check_fraction(self.small_component_ignore_fraction, "small_component_ignore_fraction")
        if self.min_area_fraction > self.max_area_fraction:
            raise ValueError("min_area_fraction exceeds max_area_fraction")

    @classmethod
    def permissive(cls):
        """Accepts every mask with any foreground, however small or fragmented."""
        return cls(0.0, 1.0, 0.0, 8, allow_multi_region=True)


@dataclass(frozen=True)
class QCVerdict:
    status: str
    reason: str
    n_regions: int = 0
    area_fraction: float = 0.0

    def __post_init__(self):
        if (self.status == ACCEPTED) != (self.reason == "ok"):
            raise ValueError(f"inconsistent verdict {self.status}/{self.reason}")

    @property
    def accepted(self):
        return self.status == ACCEPTED


def qc_mask(mask, policy=QCPolicy()):
    """Accept a mask iff it holds exactly one lesion-sized region.

    Components smaller than ``small_component_ignore_fraction`` of the image
    are treated as noise. A mask whose only foreground is such noise is
    rejected as ``area_too_small``; ``empty_mask`` means no foreground at all.
    """
    mask = check_mask(mask)
    total = mask.size
    regions = connected_components(mask, policy.connectivity)
    if not regions:
        return QCVerdict(REJECTED, "empty_mask")
    kept = [r for r in regions if r.area >= policy.small_component_ignore_fraction * total]
    if not kept:
        return QCVerdict(REJECTED, "area_too_small", 0, max(r.area for r in regions) / total)
    frac = sum(r.area for r in kept) / total
    if len(kept) > 1 and not policy.allow_multi_region:
        return QCVerdict(REJECTED, "multi_region", len(kept), frac)
    if frac < policy.min_area_fraction:
        return QCVerdict(REJECTED, "area_too_small", len(kept), frac)
    if frac > policy.max_area_fraction:
        return QCVerdict(REJECTED, "area_too_large", len(kept), frac)
    return QCVerdict(ACCEPTED, "ok", len(kept), frac)


def dilate(mask, radius=2, iterations=2):
    """Binary dilation with a ``(2*radius+1)`` square, repeated ``iterations`` times."""
    mask = check_mask(mask)
    check_positive_int(radius, "radius")
    check_positive_int(iterations, "iterations", minimum=0)
    if iterations == 0:
        return mask.copy()
    # scipy treats iterations < 1 as "until convergence", hence the guard above
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_dilation(mask, structure=structure, iterations=iterations).astype(np.uint8)


def lesion_bbox(mask):
    """Tight bounding box ``(x_min, y_min, x_max, y_max)`` of the foreground, inclusive."""
    mask = check_mask(mask)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("mask is empty; it should have been rejected by QC")
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def crop_and_resize(image, mask, out_size=224):
    """Zero the background, crop to the mask's bbox, resize bilinearly to a square.

    uint8 input yields uint8 output (rounded), so crops can be cached
    losslessly and reloaded bit-identically.
    """
    img = np.asarray(image)
    mask = check_mask(mask)
    if img.shape[:2] != mask.shape:
        raise ValueError(f"image {img.shape[:2]} and mask {mask.shape} differ in size")
    x0, y0, x1, y1 = lesion_bbox(mask)
    masked = img * mask[:, :, None].astype(img.dtype) if img.ndim == 3 else img * mask
    window = np.ascontiguousarray(masked[y0:y1 + 1, x0:x1 + 1]).astype(np.float32)
    resized = cv2.resize(window, (out_size, out_size), interpolation=cv2.INTER_LINEAR)
    if img.dtype == np.uint8:
        return np.clip(np.rint(resized), 0, 255).astype(np.uint8)
    return resized


def normalize_range(image):
    """Affine map of the whole image (all channels jointly) onto [-1, 1].

    The minimum goes to -1 and the maximum to +1. A constant image has no
    range to stretch and comes back as zeros, with a warning.
    """
    arr = np.asarray(image, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        warnings.warn("constant image; range normalization returns zeros", RuntimeWarning, stacklevel=2)
        return np.zeros_like(arr)
    # 2 * (x - lo) / range keeps both endpoints exact in floating point
    out = 2.0 * (arr - lo) / (hi - lo) - 1.0
    return np.clip(out, -1.0, 1.0)


def denormalize_range(normalized, lo, hi):
    """Inverse of :func:`normalize_range` given the source image's min and max."""
    return (np.asarray(normalized, dtype=np.float64) + 1.0) * ((hi - lo) / 2.0) + lo


def mask_digest(mask):
    return hashlib.sha256(np.ascontiguousarray(check_mask(mask)).tobytes()).hexdigest()[:16]


@dataclass
class PreprocessedImage:
    pixels: np.ndarray
    image_id: str | None = None
    mask_digest: str | None = None
    crop_bbox: tuple | None = None


def preprocess(image, mask, *, image_id=None, radius=2, iterations=2, out_size=224):
    """Dilate an accepted mask, crop the lesion, resize, normalize."""
    image = np.asarray(image)
    grown = dilate(mask, radius, iterations)
    crop = crop_and_resize(image, grown, out_size)
    return PreprocessedImage(
        pixels=normalize_range(crop),
        image_id=image_id,
        mask_digest=mask_digest(grown),
        crop_bbox=lesion_bbox(grown),
    )


class RangeNormalizer(TransformerMixin, BaseEstimator):
    """Stateless transformer applying per-image [-1, 1] range normalization."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.stack([normalize_range(x) for x in X]) if len(X) else np.zeros((0,))


class LesionCropper(TransformerMixin, BaseEstimator):
    """Turn images plus lesion masks (or probability maps) into normalized crops.

    Parameters
    ----------
    threshold : float
        Applied to probability maps; binary masks pass through unchanged.
    min_area_fraction, max_area_fraction, small_component_ignore_fraction : float
        Mask QC bounds, as in :class:`QCPolicy`.
    dilation_radius, dilation_iterations : int
    out_size : int
    on_reject : {"raise", "full_image"}
        What to do with a mask that fails QC. ``"full_image"`` resizes the
        whole image instead of cropping.

    Attributes
    ----------
    verdicts_ : list of QCVerdict
        QC outcome of each image in the last ``transform`` call.
    """

    def __init__(
        self,
        threshold=0.5,
        min_area_fraction=0.005,
        max_area_fraction=0.95,
        small_component_ignore_fraction=0.002,
        connectivity=8,
        dilation_radius=2,
        dilation_iterations=2,
        out_size=224,
        on_reject="raise",
    ):
        self.threshold = threshold
        self.min_area_fraction = min_area_fraction
        self.max_area_fraction = max_area_fraction
        self.small_component_ignore_fraction = small_component_ignore_fraction
        self.connectivity = connectivity
        self.dilation_radius = dilation_radius
        self.dilation_iterations = dilation_iterations
        self.out_size = out_size
        self.on_reject = on_reject

    @property
    def policy(self):
        return QCPolicy(
            self.min_area_fraction, self.max_area_fraction,
            self.small_component_ignore_fraction, self.connectivity,
        )

    def fit(self, X=None, y=None):
        if self.on_reject not in ("raise", "full_image"):
            raise ValueError(f"on_reject must be 'raise' or 'full_image', got {self.on_reject!r}")
        self.policy  # validates the QC bounds
        return self

    def _to_mask(self, m):
        arr = np.asarray(m)
        if arr.dtype.kind == "f":
            return binarize(arr, self.threshold)
        return check_mask(arr)

    def transform(self, X, masks):
        self.fit()
        X = list(X)
        masks = list(masks)
        if len(X) != len(masks):
            raise ValueError(f"{len(X)} images but {len(masks)} masks")
        out, self.verdicts_ = [], []
        for i, (img, m) in enumerate(zip(X, masks)):
            mask = self._to_mask(m)
            verdict = qc_mask(mask, self.policy)
            self.verdicts_.append(verdict)
            if verdict.accepted:
                pix = preprocess(
                    img, mask, radius=self.dilation_radius,
                    iterations=self.dilation_iterations, out_size=self.out_size,
                ).pixels
            elif self.on_reject == "full_image":
                full = np.ones(np.asarray(img).shape[:2], dtype=np.uint8)
                pix = normalize_range(crop_and_resize(img, full, self.out_size))
            else:
                raise ValueError(f"mask {i} rejected by QC: {verdict.reason}")
            out.append(pix)
        if not out:
            return np.zeros((0, self.out_size, self.out_size, 3))
        return np.stack(out)

    def fit_transform(self, X, masks, **fit_params):
        return self.fit().transform(X, masks)


# --------------------------------------------------------------------------- batch stage


@dataclass
class QCSummary:
    rows: list = field(default_factory=list)
    failed: dict = field(default_factory=dict)
    reasons: dict = field(default_factory=dict)

    def to_dict(self):
        return {"rows": self.rows, "failed": self.failed, "reasons": self.reasons}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @property
    def total(self):
        return self.rows[-1] if self.rows else None


def summarize_qc(before, after_ids, failed=None, reasons=None):
    """Per-class before/after/removed table in enum order plus a total row.

    ``removed_fraction`` is removed / class size; ``removed_pct_of_total``
    is removed / all records before removal, times 100.
    """
    after_ids = set(after_ids)
    n_total = before.record_count
    rows = []
    for cls in CLASSES:
        recs = [r for r in before.records if r.base_class == cls]
        if not recs:
            continue
        kept = sum(r.image_id in after_ids for r in recs)
        rows.append(_qc_row(cls, len(recs), kept, n_total))
    unlabeled = [r for r in before.records if r.base_class is None]
    if unlabeled:
        kept = sum(r.image_id in after_ids for r in unlabeled)
        rows.append(_qc_row("unlabeled", len(unlabeled), kept, n_total))
    kept_total = sum(r.image_id in after_ids for r in before.records)
    rows.append(_qc_row("total", n_total, kept_total, n_total))
    return QCSummary(rows, dict(failed or {}), dict(reasons or {}))


def _qc_row(name, before, after, n_total):
    removed = before - after
    return {
        "class": name,
        "before": before,
        "after": after,
        "removed": removed,
        "removed_fraction": removed / before if before else 0.0,
        "removed_pct_of_total": 100.0 * removed / n_total if n_total else 0.0,
    }


def run_mask_stage(manifest, predict_fn, policy=QCPolicy(), out_dir=None, *, threshold=0.5, batch_size=8):
    """Generate, QC and (optionally) write a mask for every record.

    ``predict_fn`` maps a list of uint8 images to a list of probability maps
    at each image's native size (e.g. ``UNetSegmenter.predict_proba``).
    Records that fail to load or predict are listed in the summary's
    ``failed`` map and marked rejected; the rest of the batch continues.
    """
    out_dir = None if out_dir is None else Path(out_dir)
    new_records, failed, reasons = [], {}, {}
    records = list(manifest.records)
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        images, ok = [], []
        for r in chunk:
            try:
                images.append(read_image(r.image_path))
                ok.append(r)
            except Exception as exc:  # noqa: BLE001 - isolate unreadable files
                failed[r.image_id] = f"read: {exc}"
        try:
            maps = list(predict_fn(images)) if images else []
        except Exception as exc:  # noqa: BLE001
            maps = [None] * len(ok)
            for r in ok:
                failed[r.image_id] = f"predict: {exc}"
        results = {}
        for r, prob in zip(ok, maps):
            if prob is None:
                continue
            try:
                mask = binarize(prob, threshold)
                verdict = qc_mask(mask, policy)
                mask_path = r.mask_path
                if out_dir is not None:
                    mask_path = out_dir / "masks" / f"{r.image_id}_mask.png"
                    write_mask(mask_path, mask)
                results[r.image_id] = (verdict, mask_path)
            except Exception as exc:  # noqa: BLE001
                failed[r.image_id] = f"qc: {exc}"
        for r in chunk:
            if r.image_id in results:
                verdict, mask_path = results[r.image_id]
                reasons[r.image_id] = verdict.reason
                new_records.append(replace(r, qc_status=verdict.status, mask_path=mask_path))
            else:
                reasons[r.image_id] = "failed"
                new_records.append(replace(r, qc_status=REJECTED))
    out = replace(manifest, records=tuple(new_records))
    summary = summarize_qc(
        manifest, [r.image_id for r in new_records if r.qc_status == ACCEPTED], failed, reasons
    )
    if out_dir is not None:
        atomic_write_text(out_dir / "qc_summary.json", summary.to_json())
    logger.info("mask QC: %s", summary.total)
    return out, summary


def policy_dict(policy):
    return asdict(policy)
