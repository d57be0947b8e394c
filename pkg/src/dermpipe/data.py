"""Dataset ingestion: manifests, task groupings, stratified hold-out splits and k-folds.

Every plan-producing function takes an explicit seed and returns a frozen,
JSON-serializable plan; downstream stages load the plan from disk instead of
re-randomizing.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .exceptions import MissingFilesError

logger = logging.getLogger(__name__)

CLASSES = ("akiec", "bcc", "bkl", "df", "mel", "nv", "vasc")
SOURCES = ("isic2018", "ham10000", "custom")
QC_STATUSES = ("pending", "accepted", "rejected")
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    image_path: Path
    mask_path: Path | None = None
    base_class: str | None = None
    qc_status: str = "pending"
    label: str | None = None

    def __post_init__(self):
        if self.base_class is not None and self.base_class not in CLASSES:
            raise ValueError(f"{self.image_id}: unknown class {self.base_class!r}")
        if self.qc_status not in QC_STATUSES:
            raise ValueError(f"{self.image_id}: unknown qc_status {self.qc_status!r}")

    def to_dict(self):
        return {
            "image_id": self.image_id,
            "image_path": str(self.image_path),
            "mask_path": None if self.mask_path is None else str(self.mask_path),
            "base_class": self.base_class,
            "qc_status": self.qc_status,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            image_id=d["image_id"],
            image_path=Path(d["image_path"]),
            mask_path=None if d.get("mask_path") is None else Path(d["mask_path"]),
            base_class=d.get("base_class"),
            qc_status=d.get("qc_status", "pending"),
            label=d.get("label"),
        )


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    source: str = "custom"
    task: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        counts = Counter(r.image_id for r in self.records)
        dupes = sorted(i for i, c in counts.items() if c > 1)
        if dupes:
            raise ValueError(f"duplicate image_id(s) in manifest: {dupes[:10]}")

    @property
    def record_count(self):
        return len(self.records)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self):
        return [r.image_id for r in self.records]

    def by_id(self):
        return {r.image_id: r for r in self.records}

    def class_counts(self):
        """Per-base-class counts in enum order (classes with zero records omitted)."""
        counts = Counter(r.base_class for r in self.records)
        return {c: counts[c] for c in CLASSES if counts[c]}

    def label_counts(self):
        counts = Counter(r.label for r in self.records)
        return dict(sorted(counts.items(), key=lambda kv: str(kv[0])))

    def subset(self, ids):
        keep = set(ids)
        return replace(self, records=tuple(r for r in self.records if r.image_id in keep))

    def accepted(self):
        """Records that passed mask QC (pending records are kept)."""
        return replace(self, records=tuple(r for r in self.records if r.qc_status != "rejected"))

    def to_json(self):
        payload = {
            "source": self.source,
            "task": self.task,
            "record_count": self.record_count,
            "records": [r.to_dict() for r in self.records],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        records = tuple(ImageRecord.from_dict(d) for d in payload["records"])
        if payload.get("record_count", len(records)) != len(records):
            raise ValueError("record_count does not match number of records")
        return cls(records=records, source=payload["source"], task=payload.get("task"))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


# --------------------------------------------------------------------------- loading


def _find_image(root: Path, image_id: str):
    dirs = [root, root / "images"] + sorted(p for p in root.glob("*images*") if p.is_dir())
    for d in dirs:
        for ext in IMAGE_EXTENSIONS:
            p = d / f"{image_id}{ext}"
            if p.is_file():
                return p
    return None


def _find_isic_mask(root: Path, image_id: str):
    name = f"{image_id}_segmentation.png"
    dirs = [root, root / "masks"] + sorted(
        p for p in root.glob("*GroundTruth*") if p.is_dir()
    )
    for d in dirs:
        p = d / name
        if p.is_file():
            return p
    return None


def load_manifest(root, metadata_file, source="ham10000", *, verify_decode=False, workers=4):
    """Read a metadata CSV (``image_id,dx`` at minimum) into a manifest.

    ISIC-2018 segmentation data carries no diagnosis, so ``dx`` is optional
    for ``source="isic2018"``; every ISIC record must have a
    ``<image_id>_segmentation.png`` ground-truth mask.

    Raises
    ------
    ValueError
        On an unknown ``dx`` token (names the CSV line) or a missing column.
    MissingFilesError
        Listing every image id whose image (or ISIC mask) is absent.
    """
    root = Path(root)
    if source not in SOURCES:
        raise ValueError(f"unknown source {source!r}")
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")

    text = Path(metadata_file).read_text()
    if not text.strip():
        logger.info("empty metadata file %s", metadata_file)
        return DatasetManifest(records=(), source=source)
    df = pd.read_csv(metadata_file, dtype=str, keep_default_na=False)

    if "image_id" not in df.columns:
        raise ValueError(f"metadata must have an 'image_id' column, found {list(df.columns)}")
    has_dx = "dx" in df.columns
    if not has_dx and source != "isic2018":
        raise ValueError(f"metadata must have a 'dx' column, found {list(df.columns)}")

    ids = [s.strip() for s in df["image_id"]]
    classes = [None] * len(ids)
    if has_dx:
        for row, token in enumerate(df["dx"]):
            token = token.strip().lower()
            if token == "" and source == "isic2018":
                continue
            if token not in CLASSES:
                # +2: header line and 1-based numbering
                raise ValueError(
                    f"{metadata_file}:{row + 2}: unknown class {token!r} for image {ids[row]!r}"
                )
            classes[row] = token

    with ThreadPoolExecutor(max_workers=workers) as pool:
        image_paths = list(pool.map(lambda i: _find_image(root, i), ids))
        if source == "isic2018":
            mask_paths = list(pool.map(lambda i: _find_isic_mask(root, i), ids))
        else:
            mask_paths = [None] * len(ids)

    missing = [i for i, p in zip(ids, image_paths) if p is None]
    if missing:
        raise MissingFilesError(missing, "image")
    if source == "isic2018":
        missing = [i for i, p in zip(ids, mask_paths) if p is None]
        if missing:
            raise MissingFilesError(missing, "ground-truth mask")

    if verify_decode:
        _verify_decodes(ids, image_paths, workers)

    records = tuple(
        ImageRecord(image_id=i, image_path=p, mask_path=m, base_class=c)
        for i, p, m, c in zip(ids, image_paths, mask_paths, classes)
    )
    manifest = DatasetManifest(records=records, source=source)
    logger.info("loaded %d records from %s: %s", len(records), metadata_file, manifest.class_counts())
    return manifest


def _verify_decodes(ids, paths, workers):
    from PIL import Image

    def bad(path):
        try:
            with Image.open(path) as im:
                im.load()
                return im.mode not in ("RGB", "RGBA", "P", "L") and im.mode
        except Exception as exc:  # noqa: BLE001 - any decode failure counts
            return str(exc)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        problems = list(pool.map(bad, paths))
    failed = [i for i, p in zip(ids, problems) if p]
    if failed:
        raise MissingFilesError(failed, "decodable image")


# --------------------------------------------------------------------------- task groupings


@dataclass(frozen=True)
class TaskGrouping:
    """Maps base classes onto the labels of one classification task.

    ``labels`` fixes the label order used everywhere downstream (confusion
    matrix rows, probability columns). For binary tasks the positive class
    is last, so it is label index 1 and the sigmoid target.
    """

    task_id: str
    class_map: Mapping[str, str]
    labels: tuple[str, ...]
    positive_class: str | None = None

    def __post_init__(self):
        missing = set(self.class_map.values()) - set(self.labels)
        if missing:
            raise ValueError(f"class_map targets {missing} not in labels")
        if self.positive_class is not None and self.positive_class != self.labels[-1]:
            raise ValueError("positive_class must be the last label")

    @property
    def is_binary(self):
        return len(self.labels) == 2

    def admits(self, base_class):
        return base_class in self.class_map

    def label_index(self, label):
        return self.labels.index(label)


def _binary(task_id, positive, negative, pos_classes, neg_classes):
    class_map = {c: positive for c in pos_classes}
    class_map.update({c: negative for c in neg_classes})
    return TaskGrouping(task_id, class_map, (negative, positive), positive)


TASKS = {
    "melanocytic_vs_non": _binary(
        "melanocytic_vs_non", "melanocytic", "non_melanocytic",
        ("mel", "nv"), ("akiec", "bcc", "bkl", "df", "vasc"),
    ),
    "mel_vs_nv": _binary("mel_vs_nv", "melanoma", "nevus", ("mel",), ("nv",)),
    "benign_vs_malignant": _binary(
        "benign_vs_malignant", "benign", "malignant",
        ("bkl", "df", "vasc"), ("akiec", "bcc"),
    ),
    "cancer_vs_noncancer": _binary(
        "cancer_vs_noncancer", "cancerous", "non_cancerous",
        ("akiec", "bcc", "mel"), ("bkl", "df", "nv", "vasc"),
    ),
    "seven_class": TaskGrouping("seven_class", {c: c for c in CLASSES}, CLASSES),
}


def get_task(task):
    if isinstance(task, TaskGrouping):
        return task
    try:
        return TASKS[task]
    except KeyError:
        raise ValueError(f"unknown task {task!r}; choose from {sorted(TASKS)}") from None


def apply_grouping(manifest, task):
    """Drop records the task does not admit and attach task labels."""
    task = get_task(task)
    records = []
    for r in manifest.records:
        if r.base_class is None:
            raise ValueError(f"{r.image_id} has no class label; cannot apply {task.task_id}")
        if task.admits(r.base_class):
            records.append(replace(r, label=task.class_map[r.base_class]))
    out = replace(manifest, records=tuple(records), task=task.task_id)
    logger.info("%s: %s", task.task_id, out.label_counts())
    return out


# --------------------------------------------------------------------------- splits


PARTITIONS = ("train", "val", "test")


def _strata(manifest):
    """Group ids by label (or base class, or a single stratum), sorted for determinism."""
    groups: dict[object, list[str]] = {}
    for r in manifest.records:
        key = r.label if r.label is not None else r.base_class
        groups.setdefault(key, []).append(r.image_id)
    order = list(CLASSES)

    def rank(key):
        if key in order:
            return (0, order.index(key), "")
        return (1, 0, "" if key is None else str(key))

    return [(k, sorted(groups[k])) for k in sorted(groups, key=rank)]


def largest_remainder(n, ratios):
    """Integer quotas summing to ``n``, proportional to ``ratios``.

    Remainders are distributed by decreasing fractional part; ties go to
    the earlier partition.
    """
    exact = [n * r for r in ratios]
    quotas = [math.floor(round(q, 9)) for q in exact]
    left = n - sum(quotas)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - quotas[i]), i))
    for i in order[:left]:
        quotas[i] += 1
    return quotas


def nested_quotas(n, ratios):
    """Quotas when the test set is carved first and validation from the remainder.

    ``test = ceil(r_test * n)``; the validation share ``r_val`` is then
    applied to what is left, with training keeping ``int(rest * (1 - r_val))``.
    The training ratio is implied.
    """
    _, r_val, r_test = ratios
    n_test = math.ceil(round(n * r_test, 9))
    rest = n - n_test
    n_train = int(round(rest * (1 - r_val), 9)) if r_val < 1 else 0
    return [n_train, rest - n_train, n_test]


@dataclass(frozen=True)
class SplitPlan:
    train_ids: frozenset
    val_ids: frozenset
    test_ids: frozenset
    seed: int
    ratios: tuple[float, float, float]
    task: str | None = None
    mode: str = "flat"

    def partitions(self):
        return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}

    def sizes(self):
        return tuple(len(s) for s in (self.train_ids, self.val_ids, self.test_ids))

    def to_json(self):
        payload = {
            "task": self.task,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "mode": self.mode,
            "partitions": {k: sorted(v) for k, v in self.partitions().items()},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        p = json.loads(text)
        parts = p["partitions"]
        return cls(
            frozenset(parts["train"]), frozenset(parts["val"]), frozenset(parts["test"]),
            seed=p["seed"], ratios=tuple(p["ratios"]), task=p.get("task"), mode=p.get("mode", "flat"),
        )


def make_holdout_split(manifest, ratios, seed, *, mode="flat"):
    """Stratified train/val/test split of ``manifest``.

    Parameters
    ----------
    ratios : (train, val, test)
        Positive fractions (zeros allowed) summing to 1.
    seed : int
        Required; controls which ids land where, never the per-class sizes.
    mode : {"flat", "nested"}
        ``"flat"`` takes each ratio as a share of the class total, rounded by
        largest remainder. ``"nested"`` carves the test share first and the
        validation share out of what remains (see :func:`nested_quotas`).
    """
    if seed is None:
        raise ValueError("seed is required")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    if mode not in ("flat", "nested"):
        raise ValueError(f"unknown split mode {mode!r}")
    quota_fn = largest_remainder if mode == "flat" else nested_quotas

    rng = np.random.default_rng(seed)
    parts = {p: [] for p in PARTITIONS}
    n_nonzero = sum(r > 0 for r in ratios)
    for key, ids in _strata(manifest):
        if len(ids) < n_nonzero:
            warnings.warn(
                f"class {key!r} has {len(ids)} record(s) for {n_nonzero} non-empty partitions",
                stacklevel=2,
            )
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        start = 0
        for name, q in zip(PARTITIONS, quota_fn(len(ids), ratios)):
            parts[name].extend(shuffled[start:start + q])
            start += q
    return SplitPlan(
        frozenset(parts["train"]), frozenset(parts["val"]), frozenset(parts["test"]),
        seed=seed, ratios=ratios, task=manifest.task, mode=mode,
    )


@dataclass(frozen=True)
class FoldPlan:
    k: int
    fold_test_ids: tuple[frozenset, ...]
    seed: int
    task: str | None = None
    universe: frozenset = field(default=frozenset(), repr=False)

    def __post_init__(self):
        if not self.universe:
            object.__setattr__(
                self, "universe", frozenset().union(*self.fold_test_ids) if self.fold_test_ids else frozenset()
            )

    def test_ids(self, i):
        return self.fold_test_ids[i]

    def train_ids(self, i):
        """Complement of fold ``i``'s test set; derived, never stored."""
        return self.universe - self.fold_test_ids[i]

    def split(self, ids: Sequence[str]):
        """Yield ``(train_idx, test_idx)`` index arrays over ``ids``, sklearn-CV style."""
        ids = list(ids)
        for fold in self.fold_test_ids:
            mask = np.fromiter((i in fold for i in ids), dtype=bool, count=len(ids))
            yield np.flatnonzero(~mask), np.flatnonzero(mask)

    def get_n_splits(self, *args, **kwargs):
        return self.k

    def to_json(self):
        payload = {
            "task": self.task,
            "seed": self.seed,
            "k": self.k,
            "partitions": {f"fold{i}": sorted(s) for i, s in enumerate(self.fold_test_ids)},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        p = json.loads(text)
        folds = tuple(frozenset(p["partitions"][f"fold{i}"]) for i in range(p["k"]))
        return cls(k=p["k"], fold_test_ids=folds, seed=p["seed"], task=p.get("task"))


def make_folds(manifest, k, seed):
    """Stratified k-fold partition of ``manifest``.

    Each class is shuffled and dealt into folds of ``n_c // k`` records; the
    ``n_c % k`` leftovers go to consecutive folds, continuing where the
    previous class stopped so overall fold sizes differ by at most one.
    """
    if seed is None:
        raise ValueError("seed is required")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > manifest.record_count:
        raise ValueError(f"k={k} exceeds the number of records ({manifest.record_count})")

    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    offset = 0
    for key, ids in _strata(manifest):
        if len(ids) < k:
            warnings.warn(f"class {key!r} has {len(ids)} record(s) for {k} folds", stacklevel=2)
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        base, extra = divmod(len(ids), k)
        sizes = [base] * k
        for j in range(extra):
            sizes[(offset + j) % k] += 1
        offset = (offset + extra) % k
        start = 0
        for f, size in enumerate(sizes):
            folds[f].extend(shuffled[start:start + size])
            start += size
    return FoldPlan(k=k, fold_test_ids=tuple(frozenset(f) for f in folds), seed=seed, task=manifest.task)


def synthetic_manifest(class_counts: Mapping[str, int], source="ham10000", prefix="ISIC_"):
    """Manifest of placeholder records with the given per-class counts.

    Paths are not checked; useful for exercising split arithmetic at full
    dataset scale without the images.
    """
    records = []
    n = 0
    for cls in CLASSES:
        for _ in range(class_counts.get(cls, 0)):
            iid = f"{prefix}{n:07d}"
            records.append(ImageRecord(iid, Path(f"{iid}.jpg"), base_class=cls))
            n += 1
    return DatasetManifest(records=tuple(records), source=source)


def read_plan(path):
    text = Path(path).read_text()
    return FoldPlan.from_json(text) if "k" in json.loads(text) else SplitPlan.from_json(text)
