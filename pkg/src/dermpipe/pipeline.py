"""Stage orchestration over a run directory.

Every stage writes ``stages/<name>.json`` holding the digest of the config
slice and upstream digests that produced it. Re-running a stage whose digest
is unchanged is a no-op unless forced; a stage whose upstream marker is
missing or carries a different digest raises :class:`MissingStageError`.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, is_dataclass
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image

from .classifier import DenseNetClassifier
from .config import PipelineConfig
from .data import (
    DatasetManifest,
    FoldPlan,
    SplitPlan,
    TASKS,
    apply_grouping,
    get_task,
    load_manifest,
    make_folds,
    make_holdout_split,
)
from .exceptions import MissingStageError
from .io import atomic_write_text, read_image, read_mask, write_png
from .masks import QCPolicy, crop_and_resize, dilate, normalize_range, run_mask_stage
from .report import evaluate_folds, prediction_frame, render_report
from .segmentation import UNetSegmenter, evaluate_segmenter
from .training import config_digest

logger = logging.getLogger(__name__)

BINARY_TASKS = tuple(t for t, g in TASKS.items() if g.is_binary)


def _plain(obj):
    return asdict(obj) if is_dataclass(obj) else obj


def _file_hash(path):
    if path is None or not Path(path).exists():
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


class Pipeline:
    def __init__(self, config: PipelineConfig, out=None, force=False, parallel_folds=1):
        self.config = config
        self.out = Path(out or config.out)
        self.force = force
        self.parallel_folds = parallel_folds
        self.out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.out / "config.effective.yaml", config.to_yaml())

    # ------------------------------------------------------------------ digests

    def _digest(self, *parts):
        return config_digest({str(i): _plain(p) for i, p in enumerate(parts)})

    def digest(self, stage, task=None):
        c = self.config
        if stage == "ingest":
            return self._digest(
                c.data, _file_hash(c.data.isic_metadata), _file_hash(c.data.ham_metadata)
            )
        if stage == "split":
            if task is None:
                return self._digest(self.digest("ingest"), c.split.isic_ratios, c.split.isic_mode, c.seed)
            return self._digest(
                self.digest("segment"), c.split.holdout_ratios, c.split.holdout_mode, c.split.k, c.seed, task
            )
        if stage == "train-seg":
            return self._digest(self.digest("split"), c.segmenter, c.seed)
        if stage == "segment":
            return self._digest(self.digest("train-seg"), self.digest("ingest"), c.qc)
        if stage == "preprocess":
            return self._digest(self.digest("segment"), c.preprocess, task)
        if stage == "train-clf":
            return self._digest(
                self.digest("split", task), self.digest("preprocess", task), c.classifier, c.seed, task
            )
        if stage == "evaluate":
            return self._digest(self.digest("train-clf", task))
        raise ValueError(f"unknown stage {stage!r}")

    def _marker(self, stage, task=None):
        name = stage if task is None else f"{stage}_{task}"
        return self.out / "stages" / f"{name}.json"

    def _up_to_date(self, stage, task=None):
        marker = self._marker(stage, task)
        if not marker.exists():
            return False
        return json.loads(marker.read_text())["digest"] == self.digest(stage, task)

    def _require(self, stage, task=None):
        if not self._up_to_date(stage, task):
            state = "stale" if self._marker(stage, task).exists() else "missing"
            suffix = f" --task {task}" if task else ""
            raise MissingStageError(f"dermpipe {stage}{suffix}", f"{state} stage marker {self._marker(stage, task).name}")

    def _run(self, stage, fn, task=None):
        if not self.force and self._up_to_date(stage, task):
            logger.info("%s%s is up to date; skipping", stage, f" ({task})" if task else "")
            return json.loads(self._marker(stage, task).read_text())
        outputs = fn() or {}
        payload = {"stage": stage, "task": task, "digest": self.digest(stage, task), "outputs": outputs}
        atomic_write_text(self._marker(stage, task), json.dumps(payload, indent=2, sort_keys=True, default=str))
        payload["ran"] = True
        return payload

    # ------------------------------------------------------------------ stages

    def ingest(self):
        def run():
            d = self.config.data
            outputs = {}
            for source, root, meta in (
                ("isic2018", d.isic_root, d.isic_metadata),
                ("ham10000", d.ham_root, d.ham_metadata),
            ):
                if root is None or meta is None:
                    continue
                manifest = load_manifest(root, meta, source)
                path = self.out / "ingest" / f"manifest_{source}.json"
                atomic_write_text(path, manifest.to_json())
                outputs[source] = {"path": str(path), "counts": manifest.class_counts(), "n": manifest.record_count}
            if not outputs:
                raise ValueError("no dataset paths configured under [data]")
            return outputs

        return self._run("ingest", run)

    def _manifest(self, source):
        path = self.out / "ingest" / f"manifest_{source}.json"
        if not path.exists():
            raise MissingStageError("dermpipe ingest", f"no {source} manifest")
        return DatasetManifest.load(path)

    def split(self, task=None):
        if task is None:
            self._require("ingest")
        else:
            self._require("segment")

        def run():
            c = self.config
            if task is None:
                plan = make_holdout_split(self._manifest("isic2018"), c.split.isic_ratios, c.seed, mode=c.split.isic_mode)
                name = "isic2018_holdout"
            else:
                manifest = apply_grouping(self._qc_manifest().accepted(), task)
                if get_task(task).is_binary:
                    plan = make_folds(manifest, c.split.k, c.seed)
                    name = f"{task}_folds"
                else:
                    plan = make_holdout_split(manifest, c.split.holdout_ratios, c.seed, mode=c.split.holdout_mode)
                    name = f"{task}_holdout"
            payload = json.loads(plan.to_json())
            payload["config_digest"] = self.digest("split", task)
            path = self.out / "splits" / f"{name}.json"
            atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True))
            sizes = plan.sizes() if isinstance(plan, SplitPlan) else [len(f) for f in plan.fold_test_ids]
            return {"path": str(path), "sizes": list(sizes)}

        return self._run("split", run, task)

    def _plan(self, task=None):
        marker = json.loads(self._marker("split", task).read_text())
        text = Path(marker["outputs"]["path"]).read_text()
        return FoldPlan.from_json(text) if "k" in json.loads(text) else SplitPlan.from_json(text)

    def _segmenter_params(self):
        s = self.config.segmenter
        return dict(
            input_size=tuple(s.input_size), depth=s.depth, primary_filters=s.primary_filters,
            dropout_rate=s.dropout_rate, max_epochs=s.max_epochs, batch_size=s.batch_size,
            initial_lr=s.initial_lr, plateau_patience=s.plateau_patience,
            plateau_factor=s.plateau_factor, max_reductions=s.max_reductions,
            threshold=self.config.qc.threshold, random_state=self.config.seed,
        )

    def train_seg(self):
        self._require("split")

        def run():
            manifest = self._manifest("isic2018").by_id()
            plan = self._plan()

            def load(ids):
                recs = [manifest[i] for i in sorted(ids)]
                return [read_image(r.image_path) for r in recs], [read_mask(r.mask_path) for r in recs], [r.image_id for r in recs]

            Xtr, ytr, ids = load(plan.train_ids)
            Xva, yva, _ = load(plan.val_ids)
            seg_dir = self.out / "segmenter"
            seg = UNetSegmenter(**self._segmenter_params())
            seg.fit(Xtr, ytr, Xva or None, yva or None, ids=ids)
            ckpt = seg.save(seg_dir / "unet.pt")
            _stamp_sidecar(ckpt, self.digest("train-seg"))
            atomic_write_text(seg_dir / "history.csv", seg.history_.to_csv())
            outputs = {"checkpoint": str(ckpt), "epochs": seg.n_epochs_, "best_val_acc": seg.best_score_}
            if plan.test_ids:
                Xte, yte, _ = load(plan.test_ids)
                outputs["test"] = evaluate_segmenter(seg, Xte, yte)
                atomic_write_text(seg_dir / "eval.json", json.dumps(outputs["test"], indent=2, sort_keys=True))
            return outputs

        return self._run("train-seg", run)

    def segment(self):
        self._require("train-seg")
        self._require("ingest")

        def run():
            seg = UNetSegmenter.load(self.out / "segmenter" / "unet.pt")
            q = self.config.qc
            policy = QCPolicy(q.min_area_fraction, q.max_area_fraction, q.small_component_ignore_fraction, q.connectivity)
            manifest, summary = run_mask_stage(
                self._manifest("ham10000"), seg.predict_proba, policy, self.out, threshold=q.threshold
            )
            atomic_write_text(self.out / "masks" / "manifest_qc.json", manifest.to_json())
            return {"summary": summary.total, "failed": sorted(summary.failed)}

        return self._run("segment", run)

    def _qc_manifest(self):
        return DatasetManifest.load(self.out / "masks" / "manifest_qc.json")

    def preprocess(self, task):
        self._require("segment")

        def run():
            p = self.config.preprocess
            manifest = apply_grouping(self._qc_manifest().accepted(), task)
            cache = self.out / "preprocessed" / task
            index = {}
            for r in manifest.records:
                image = read_image(r.image_path)
                grown = dilate(read_mask(r.mask_path), p.dilation_radius, p.dilation_iterations)
                crop = crop_and_resize(image, grown, p.out_size)
                write_png(cache / f"{r.image_id}.png", crop)
                index[r.image_id] = r.label
            atomic_write_text(
                cache / "index.json",
                json.dumps({"config_digest": self.digest("preprocess", task), "labels": index}, indent=2, sort_keys=True),
            )
            return {"n": len(index), "dir": str(cache)}

        return self._run("preprocess", run, task)

    def load_crops(self, task, ids):
        return load_crops(self.out / "preprocessed" / task, ids)

    def _classifier_params(self, task):
        c = self.config.classifier
        params = dict(
            input_size=c.input_size, weights_path=c.weights_path, pretrained=c.pretrained,
            freeze_backbone=c.freeze_backbone, decay=c.decay, validation_fraction=c.validation_fraction,
            class_weight=c.class_weight, augment=c.augment, random_state=self.config.seed,
        )
        for key in ("epochs", "batch_size", "learning_rate"):
            if getattr(c, key) is not None:
                params[key] = getattr(c, key)
        return params

    def train_clf(self, task):
        self._require("split", task)
        self._require("preprocess", task)

        def run():
            jobs = self._fold_jobs(task)
            if self.parallel_folds > 1 and len(jobs) > 1:
                with ProcessPoolExecutor(self.parallel_folds, mp_context=get_context("spawn")) as pool:
                    results = list(pool.map(_train_fold, jobs))
            else:
                results = [_train_fold(job) for job in jobs]
            return {"folds": results}

        return self._run("train-clf", run, task)

    def _fold_jobs(self, task):
        plan = self._plan(task)
        labels = json.loads((self.out / "preprocessed" / task / "index.json").read_text())["labels"]
        base = dict(
            out=str(self.out), task=task, params=self._classifier_params(task),
            digest=self.digest("train-clf", task), labels=labels,
        )
        if isinstance(plan, FoldPlan):
            return [
                dict(base, fold=i, train=sorted(plan.train_ids(i)), val=None, test=sorted(plan.test_ids(i)))
                for i in range(plan.k)
            ]
        return [dict(base, fold=0, train=sorted(plan.train_ids), val=sorted(plan.val_ids) or None, test=sorted(plan.test_ids))]

    def evaluate(self, task):
        self._require("train-clf", task)

        def run():
            marker = json.loads(self._marker("train-clf", task).read_text())
            expected = self.digest("train-clf", task)
            frames = []
            for fold in marker["outputs"]["folds"]:
                sidecar = json.loads(Path(fold["sidecar"]).read_text())
                if sidecar.get("stage_digest") != expected:
                    raise MissingStageError(
                        f"dermpipe train-clf --task {task}", f"fold {fold['fold']} model digest mismatch"
                    )
                frames.append(pd.read_csv(fold["predictions"], dtype={"true_label": str, "pred_label": str}))
            result = evaluate_folds(frames, task)
            paths = render_report(result, self.out / "reports" / task)
            return {"files": [str(p) for p in paths], "metrics": result.metrics}

        return self._run("evaluate", run, task)


def _stamp_sidecar(weights_path, digest):
    sidecar = Path(weights_path).with_suffix(".json")
    payload = json.loads(sidecar.read_text())
    payload["stage_digest"] = digest
    atomic_write_text(sidecar, json.dumps(payload, indent=2, sort_keys=True, default=str))
    return sidecar


def load_crops(cache_dir, ids):
    """Cached uint8 crops, range-normalized to [-1, 1], as ``(n, s, s, 3)`` float32."""
    out = []
    for i in ids:
        with Image.open(Path(cache_dir) / f"{i}.png") as im:
            out.append(normalize_range(np.asarray(im)))
    return np.stack(out).astype(np.float32)


def _train_fold(job):
    """Train and score one fold; module-level so it can run in a worker process."""
    out = Path(job["out"])
    task = get_task(job["task"])
    labels = job["labels"]

    def load(ids):
        return load_crops(out / "preprocessed" / task.task_id, ids), [labels[i] for i in ids]

    Xtr, ytr = load(job["train"])
    Xva, yva = load(job["val"]) if job["val"] else (None, None)
    Xte, yte = load(job["test"])
    params = dict(job["params"])
    params["random_state"] = params.get("random_state", 0) + job["fold"]
    est = DenseNetClassifier.for_task(task, **params)
    est.fit(Xtr, ytr, Xva, yva)

    fold_dir = out / "runs" / task.task_id / f"fold{job['fold']}"
    weights = est.save(fold_dir / "model.pt")
    sidecar = _stamp_sidecar(weights, job["digest"])
    atomic_write_text(fold_dir / "history.csv", est.history_.to_csv())
    probs = est.predict_positive_proba(Xte) if task.is_binary else est.predict_proba(Xte)
    pred = est.predict(Xte)
    frame = prediction_frame(job["test"], yte, pred, probs, list(est.classes_))
    atomic_write_text(fold_dir / "predictions.csv", frame.to_csv(index=False, float_format="%.10g"))
    return {
        "fold": job["fold"], "weights": str(weights), "sidecar": str(sidecar),
        "predictions": str(fold_dir / "predictions.csv"), "best_val_metric": est.best_score_,
        "n_train": len(ytr), "n_test": len(yte),
    }
