"""DenseNet-121 lesion classifier with a pooled dense head.

Head: global average pooling -> dense 256 (ReLU) -> batch norm -> dropout
0.25 -> dense output, with a sigmoid unit for binary tasks or a softmax over
the classes otherwise. Trained with RMSprop and per-update learning-rate
decay ``lr_t = lr / (1 + decay * t)``.
"""

from __future__ import annotations

import logging
import math
import re
import warnings
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torchvision
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from torch import nn
from torch.nn import functional as F

from ._validation import check_image_batch, check_is_fitted
from .data import get_task
from .training import (
    TrainingHistory,
    clone_state,
    config_digest,
    load_checkpoint,
    save_checkpoint,
    seed_everything,
)

logger = logging.getLogger(__name__)

BACKBONE_FEATURES = 1024  # DenseNet-121 final feature channels
IMAGENET_WEIGHTS_URL = torchvision.models.DenseNet121_Weights.IMAGENET1K_V1.url


@dataclass(frozen=True)
class HeadConfig:
    n_outputs: int = 1
    fc_units: int = 256
    dropout_rate: float = 0.25

    @property
    def activation(self):
        return "sigmoid" if self.n_outputs == 1 else "softmax"

    def n_trainable(self, in_features=BACKBONE_FEATURES):
        """Closed-form trainable parameter count of the head."""
        dense1 = in_features * self.fc_units + self.fc_units
        batch_norm = 2 * self.fc_units  # gamma and beta; running stats are buffers
        dense2 = self.fc_units * self.n_outputs + self.n_outputs
        return dense1 + batch_norm + dense2


@dataclass(frozen=True)
class ClassifierConfig:
    head: HeadConfig = HeadConfig()
    input_size: int = 224
    weights_path: str | None = None
    pretrained: bool = True
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-4
    decay: float = 1e-6
    rho: float = 0.9
    eps: float = 1e-7
    freeze_backbone: bool = False
    class_weight: str | None = None
    augment: bool = False

    @classmethod
    def for_task(cls, task, **overrides):
        """Hyper-parameters for a task: binary tasks vs the 7-class task."""
        task = get_task(task)
        if task.is_binary:
            base = dict(head=HeadConfig(1), epochs=30, batch_size=16, learning_rate=1e-4)
        else:
            base = dict(head=HeadConfig(len(task.labels)), epochs=50, batch_size=32, learning_rate=6e-4)
        base.update(overrides)
        return cls(**base)


def _remap_legacy_keys(state):
    pattern = re.compile(r"^(.*denselayer\d+\.(?:norm|relu|conv))\.((?:[12])\.(?:weight|bias|running_mean|running_var))$")
    out = {}
    for k, v in state.items():
        m = pattern.match(k)
        out[m.group(1) + m.group(2) if m else k] = v
    return out


def load_backbone(weights_path=None, pretrained=True):
    """DenseNet-121 feature extractor, optionally loaded from an ImageNet state dict."""
    net = torchvision.models.densenet121(weights=None)
    if pretrained:
        if weights_path is None or not Path(weights_path).is_file():
            raise FileNotFoundError(
                f"ImageNet DenseNet-121 weights not found at {weights_path!r}. Download "
                f"{IMAGENET_WEIGHTS_URL} and pass its path as weights_path, or set "
                f"pretrained=False to train from random initialization."
            )
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        state = _remap_legacy_keys(state)
        state = {k: v for k, v in state.items() if not k.startswith("classifier.")}
        missing, _ = net.load_state_dict(state, strict=False)
        missing = [k for k in missing if not k.startswith("classifier.")]
        if missing:
            raise ValueError(f"weights file {weights_path} lacks {len(missing)} backbone tensors")
    return net.features


class DenseNetHead(nn.Module):
    def __init__(self, head: HeadConfig, weights_path=None, pretrained=True):
        super().__init__()
        self.head_config = head
        self.features = load_backbone(weights_path, pretrained)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(BACKBONE_FEATURES, head.fc_units)
        self.bn = nn.BatchNorm1d(head.fc_units)
        self.dropout = nn.Dropout(head.dropout_rate)
        self.out = nn.Linear(head.fc_units, head.n_outputs)

    def forward(self, x, logits=True):
        z = F.relu(self.features(x))
        z = torch.flatten(self.pool(z), 1)
        z = self.dropout(self.bn(F.relu(self.fc(z))))
        z = self.out(z)
        if logits:
            return z
        return torch.sigmoid(z) if self.head_config.n_outputs == 1 else torch.softmax(z, dim=1)

    def head_modules(self):
        return [self.pool, self.fc, self.bn, self.dropout, self.out]

    def head_layers(self):
        """The head as a layer sequence, e.g. ``["GlobalAveragePooling2D", ...]``."""
        return [
            "GlobalAveragePooling2D",
            f"Dense({self.fc.out_features}, relu)",
            "BatchNormalization",
            f"Dropout({self.dropout.p})",
            f"Dense({self.out.out_features})",
            "Sigmoid" if self.head_config.n_outputs == 1 else "Softmax",
        ]

    def head_parameter_count(self):
        return sum(p.numel() for m in self.head_modules() for p in m.parameters() if p.requires_grad)


def build_classifier(config=ClassifierConfig()):
    model = DenseNetHead(config.head, config.weights_path, config.pretrained)
    if config.freeze_backbone:
        for p in model.features.parameters():
            p.requires_grad_(False)
    return model


def _batches(n, batch_size):
    """Batch boundaries; a trailing singleton joins the previous batch (batch norm needs >= 2)."""
    bounds = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        last = bounds.pop()
        bounds[-1] = (bounds[-1][0], last[1])
    return bounds


class DenseNetClassifier(ClassifierMixin, BaseEstimator):
    """Fine-tunes DenseNet-121 plus the dense head on preprocessed lesion crops.

    Expects ``X`` of shape ``(n, input_size, input_size, 3)`` with values in
    [-1, 1]. With two classes the network has one sigmoid unit scoring
    ``classes_[1]``; otherwise a softmax over ``classes_``.

    Parameters
    ----------
    classes : sequence, optional
        Fixes label order (for binary tasks the positive class goes last).
        Every listed class must occur in the training labels.
    validation_fraction : float
        Share of the training set held out (stratified) for picking the best
        epoch when no explicit validation set is given. 0 monitors training
        accuracy instead.
    """

    def __init__(
        self,
        classes=None,
        input_size=224,
        fc_units=256,
        head_dropout=0.25,
        epochs=30,
        batch_size=16,
        learning_rate=1e-4,
        decay=1e-6,
        rho=0.9,
        weights_path=None,
        pretrained=True,
        freeze_backbone=False,
        class_weight=None,
        augment=False,
        validation_fraction=0.1,
        shuffle=True,
        threshold=0.5,
        checkpoint_path=None,
        random_state=0,
        verbose=False,
    ):
        self.classes = classes
        self.input_size = input_size
        self.fc_units = fc_units
        self.head_dropout = head_dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.decay = decay
        self.rho = rho
        self.weights_path = weights_path
        self.pretrained = pretrained
        self.freeze_backbone = freeze_backbone
        self.class_weight = class_weight
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.shuffle = shuffle
        self.threshold = threshold
        self.checkpoint_path = checkpoint_path
        self.random_state = random_state
        self.verbose = verbose

    @classmethod
    def for_task(cls, task, **overrides):
        task = get_task(task)
        cfg = ClassifierConfig.for_task(task)
        params = dict(
            classes=list(task.labels), epochs=cfg.epochs,
            batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
        )
        params.update(overrides)
        return cls(**params)

    def _config(self, n_classes):
        return ClassifierConfig(
            head=HeadConfig(1 if n_classes == 2 else n_classes, self.fc_units, self.head_dropout),
            input_size=self.input_size,
            weights_path=None if self.weights_path is None else str(self.weights_path),
            pretrained=self.pretrained,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            decay=self.decay,
            rho=self.rho,
            freeze_backbone=self.freeze_backbone,
            class_weight=self.class_weight,
            augment=self.augment,
        )

    def _check_X(self, X):
        size = (self.input_size, self.input_size)
        X = check_image_batch(X, size=size)
        if X.size and (X.min() < -1 - 1e-6 or X.max() > 1 + 1e-6):
            raise ValueError("inputs must be range-normalized to [-1, 1]")
        return torch.from_numpy(np.ascontiguousarray(X.transpose(0, 3, 1, 2)))

    def _encode(self, y):
        index = {c: i for i, c in enumerate(self.classes_)}
        unknown = sorted({str(v) for v in y if v not in index})
        if unknown:
            raise ValueError(f"labels {unknown} not among classes {list(self.classes_)}")
        return torch.tensor([index[v] for v in y], dtype=torch.long)

    def fit(self, X, y, X_val=None, y_val=None):
        y = list(y)
        if self.classes is not None:
            classes = list(self.classes)
            absent = [c for c in classes if c not in set(y)]
            if absent:
                raise ValueError(f"class(es) {absent} absent from the training set")
        else:
            classes = sorted(set(y))
        if len(classes) < 2:
            raise ValueError("need at least two classes to train a classifier")
        self.classes_ = np.array(classes, dtype=object)

        if X_val is None and self.validation_fraction > 0:
            X, y, X_val, y_val = self._holdout(X, y, len(classes))

        xs, ys = self._check_X(X), self._encode(y)
        if X_val is not None:
            xv, yv = self._check_X(X_val), self._encode(list(y_val))
        else:
            xv, yv = xs, ys

        config = self._config(len(classes))
        gen = seed_everything(self.random_state)
        model = build_classifier(config)
        params = [p for p in model.parameters() if p.requires_grad]
        opt = torch.optim.RMSprop(params, lr=self.learning_rate, alpha=self.rho, eps=config.eps)
        # per-update decay, counted in optimizer steps across epochs
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda t: 1.0 / (1.0 + self.decay * t))
        weights = self._class_weights(ys, len(classes))
        binary = len(classes) == 2

        history = TrainingHistory()
        best_score, best_state, best_epoch = -np.inf, clone_state(model), -1
        n = xs.shape[0]
        for epoch in range(self.epochs):
            lr = opt.param_groups[0]["lr"]
            model.train()
            order = torch.randperm(n, generator=gen) if self.shuffle else torch.arange(n)
            tot_loss = correct = 0.0
            for a, b in _batches(n, self.batch_size):
                idx = order[a:b]
                xb, yb = xs[idx], ys[idx]
                if self.augment:
                    xb = _flip(xb, gen)
                out = model(xb)
                loss = _loss(out, yb, binary, weights)
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                tot_loss += loss.item() * len(idx)
                correct += (_hard(out, binary) == yb).sum().item()
            val_loss, val_acc = self._evaluate(model, xv, yv, binary, weights)
            history.append(
                epoch=epoch, train_loss=tot_loss / n, val_loss=val_loss,
                train_acc=correct / n, val_acc=val_acc, lr=lr,
            )
            if val_acc > best_score:
                best_score, best_state, best_epoch = val_acc, clone_state(model), epoch
            if self.verbose:
                logger.info("epoch %d loss %.4f acc %.4f val_acc %.4f", epoch, tot_loss / n, correct / n, val_acc)

        model.load_state_dict(best_state)
        model.eval()
        self.model_ = model
        self.history_ = history
        self.best_score_ = best_score
        self.best_epoch_ = best_epoch
        self.config_ = config
        self.config_digest_ = config_digest(config, {"classes": [str(c) for c in classes]})
        if self.checkpoint_path:
            self.save(self.checkpoint_path)
        return self

    def _holdout(self, X, y, k):
        """Stratified validation holdout, at least one record per class.

        Falls back to monitoring training accuracy (with a warning) when the
        set is too small to leave every class in both parts.
        """
        n = len(y)
        n_val = max(k, math.ceil(self.validation_fraction * n))
        smallest = min(Counter(y).values())
        if smallest < 2 or n - n_val < k:
            warnings.warn(
                f"training set of {n} records is too small for a stratified validation holdout; "
                "monitoring training accuracy instead",
                stacklevel=3,
            )
            return X, y, None, None
        tr, va = train_test_split(np.arange(n), test_size=n_val, random_state=self.random_state, stratify=y)
        tr, va = np.sort(tr), np.sort(va)
        X = np.asarray(X)
        return X[tr], [y[i] for i in tr], X[va], [y[i] for i in va]

    def _class_weights(self, ys, k):
        if self.class_weight is None:
            return None
        if self.class_weight != "balanced":
            raise ValueError(f"class_weight must be None or 'balanced', got {self.class_weight!r}")
        counts = torch.bincount(ys, minlength=k).float()
        return (ys.numel() / (k * counts)).float()

    def _evaluate(self, model, xv, yv, binary, weights):
        model.eval()
        loss = correct = 0.0
        with torch.no_grad():
            for a, b in _batches(xv.shape[0], self.batch_size):
                out = model(xv[a:b])
                loss += _loss(out, yv[a:b], binary, weights).item() * (b - a)
                correct += (_hard(out, binary) == yv[a:b]).sum().item()
        return loss / xv.shape[0], correct / xv.shape[0]

    def _raw_proba(self, X):
        check_is_fitted(self, "model_")
        xs = self._check_X(X)
        k = 1 if len(self.classes_) == 2 else len(self.classes_)
        if xs.shape[0] == 0:
            return np.zeros((0, k))
        self.model_.eval()
        outs = []
        with torch.no_grad():
            for a in range(0, xs.shape[0], self.batch_size):
                logits = self.model_(xs[a:a + self.batch_size]).double()
                outs.append(torch.sigmoid(logits) if k == 1 else torch.softmax(logits, dim=1))
        return torch.cat(outs).numpy()

    def predict_proba(self, X):
        """Class probabilities, shape ``(n, n_classes)`` in ``classes_`` order."""
        p = self._raw_proba(X)
        if len(self.classes_) == 2:
            return np.hstack([1.0 - p, p])
        return p

    def predict_positive_proba(self, X):
        """Probability of ``classes_[1]`` for a binary model."""
        if len(self.classes_) != 2:
            raise ValueError("predict_positive_proba is only defined for binary models")
        return self._raw_proba(X)[:, 0]

    def predict(self, X):
        p = self._raw_proba(X)
        if len(self.classes_) == 2:
            return decide_label(p[:, 0], self.classes_, self.threshold)
        return decide_label(p, self.classes_)

    # ------------------------------------------------------------------ persistence

    def sidecar(self):
        check_is_fitted(self, "model_")
        params = self.get_params()
        params["weights_path"] = None if self.weights_path is None else str(self.weights_path)
        params.pop("checkpoint_path")
        return {
            "params": params,
            "classes": [str(c) for c in self.classes_],
            "config": asdict(self.config_),
            "optimizer": {"name": "rmsprop", "rho": self.rho, "eps": self.config_.eps,
                          "decay": self.decay, "decay_rule": "lr / (1 + decay * iterations)"},
            "best_epoch": self.best_epoch_,
            "best_val_metric": self.best_score_,
            "config_digest": self.config_digest_,
        }

    def save(self, path):
        save_checkpoint(path, self.model_.state_dict(), self.sidecar())
        return Path(path)

    @classmethod
    def load(cls, path):
        state, sidecar = load_checkpoint(path)
        if not sidecar:
            raise ValueError(f"{path} has no sidecar JSON; cannot rebuild the network")
        params = dict(sidecar["params"])
        params["pretrained"] = False  # weights come from the checkpoint itself
        est = cls(**params)
        est.classes_ = np.array(sidecar["classes"], dtype=object)
        config = est._config(len(est.classes_))
        model = build_classifier(config)
        try:
            model.load_state_dict(state)
        except RuntimeError as exc:
            raise ValueError(f"weights in {path} do not match the configured graph: {exc}") from exc
        model.eval()
        est.model_ = model
        est.config_ = config
        est.config_digest_ = sidecar["config_digest"]
        est.best_score_ = sidecar["best_val_metric"]
        est.best_epoch_ = sidecar["best_epoch"]
        est.history_ = None
        return est


def _loss(out, yb, binary, weights):
    if binary:
        target = yb.float()
        w = None if weights is None else weights[yb]
        return F.binary_cross_entropy_with_logits(out[:, 0], target, weight=w)
    return F.cross_entropy(out, yb, weight=weights)


def _hard(out, binary):
    if binary:
        return (out[:, 0] > 0).long()
    return out.argmax(dim=1)


def _flip(xb, gen):
    if torch.rand(1, generator=gen).item() < 0.5:
        xb = xb.flip(3)
    if torch.rand(1, generator=gen).item() < 0.5:
        xb = xb.flip(2)
    return xb


def decide_label(probs, labels, threshold=0.5):
    """Hard labels from probabilities.

    1-D ``probs`` are positive-class scores for a binary task: ``labels[1]``
    iff ``p > threshold``. 2-D ``probs`` take the arg-max column; on exact
    ties the lowest index wins.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = list(labels)
    if probs.ndim == 0:
        return labels[1] if probs > threshold else labels[0]
    if probs.ndim == 1:
        if len(labels) != 2:
            raise ValueError("1-D probabilities need exactly two labels")
        return np.array([labels[1] if p > threshold else labels[0] for p in probs], dtype=object)
    if probs.shape[1] != len(labels):
        raise ValueError(f"{probs.shape[1]} probability columns for {len(labels)} labels")
    return np.array([labels[i] for i in np.argmax(probs, axis=1)], dtype=object)


def predict_proba(model, crops):
    """Binary models: p(positive) per crop, shape ``(n,)``; multiclass: ``(n, k)`` rows summing to 1."""
    if len(model.classes_) == 2:
        return model.predict_positive_proba(crops)
    return model.predict_proba(crops)


@dataclass
class TrainedClassifier:
    weights_path: Path | None
    task_id: str
    fold_index: int | None
    best_val_metric: float
    config_digest: str


def train_classifier(X_train, y_train, X_val, y_val, task, seed, *, fold_index=None, out_path=None, **overrides):
    """Fit a task-configured classifier; returns ``(estimator, TrainedClassifier, history)``."""
    task = get_task(task)
    est = DenseNetClassifier.for_task(task, random_state=seed, checkpoint_path=out_path, **overrides)
    est.fit(X_train, y_train, X_val, y_val)
    record = TrainedClassifier(
        None if out_path is None else Path(out_path), task.task_id, fold_index,
        est.best_score_, est.config_digest_,
    )
    return est, record, est.history_
