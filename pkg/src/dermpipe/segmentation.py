"""U-Net lesion segmenter with a plateau learning-rate schedule and best-weight checkpointing."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn

from ._validation import check_image, check_is_fitted, check_mask
from .exceptions import RecordErrors
from .training import (
    CheckpointRecord,
    PlateauController,
    TrainingHistory,
    clone_state,
    config_digest,
    load_checkpoint,
    save_checkpoint,
    seed_everything,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmenterConfig:
    input_size: tuple[int, int] = (224, 320)  # (height, width)
    depth: int = 5
    primary_filters: int = 32
    dropout_rate: float = 0.4
    output_channels: int = 1

    def validate(self):
        h, w = self.input_size
        step = 2 ** self.depth
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if h % step or w % step:
            raise ValueError(
                f"input size {h}x{w} is not divisible by 2**depth={step}; every "
                f"contraction block halves the resolution, so both sides must be "
                f"multiples of {step}"
            )
        if self.primary_filters < 1:
            raise ValueError("primary_filters must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.output_channels != 1:
            raise ValueError("the segmenter emits a single lesion-probability channel")
        return self


@dataclass(frozen=True)
class TrainSchedule:
    max_epochs: int = 150
    batch_size: int = 24
    initial_lr: float = 1e-3
    plateau_patience: int = 10
    plateau_factor: float = 0.01
    max_reductions: int = 1
    monitored_metric: str = "val_pixel_accuracy"
    loss: str = "binary_crossentropy"
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-7

    def validate(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("plateau_patience, max_epochs and batch_size must be >= 1")
        return self


def _double_conv(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder of ``depth`` blocks, a bottleneck, ``depth`` decoder blocks with skips.

    ``forward`` returns logits by default; ``forward(x, logits=False)``
    applies the final sigmoid.
    """

    def __init__(self, config: SegmenterConfig):
        super().__init__()
        config.validate()
        self.config = config
        f = config.primary_filters
        chans = [f * 2 ** i for i in range(config.depth)]
        self.encoder = nn.ModuleList()
        c_in = 3
        for c in chans:
            self.encoder.append(_double_conv(c_in, c))
            c_in = c
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _double_conv(chans[-1], chans[-1] * 2)
        self.dropout = nn.Dropout2d(config.dropout_rate)
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        c_in = chans[-1] * 2
        for c in reversed(chans):
            self.up.append(nn.ConvTranspose2d(c_in, c, 2, stride=2))
            self.decoder.append(_double_conv(2 * c, c))
            c_in = c
        self.final = nn.Conv2d(chans[0], config.output_channels, 1)
        self.activation = nn.Sigmoid()

    def forward(self, x, logits=True):
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.dropout(self.bottleneck(x))
        for up, block, skip in zip(self.up, self.decoder, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1))
        x = self.final(x)
        return x if logits else self.activation(x)

    def describe(self):
        return {
            "encoder_channels": [blk[0].out_channels for blk in self.encoder],
            "bottleneck_channels": self.bottleneck[0].out_channels,
            "decoder_channels": [blk[0].out_channels for blk in self.decoder],
            "output_channels": self.final.out_channels,
            "output_activation": type(self.activation).__name__,
            "n_parameters": sum(p.numel() for p in self.parameters()),
        }


def build_segmenter(config=SegmenterConfig()):
    return UNet(config.validate())


# --------------------------------------------------------------------------- pixel metrics


def pixel_accuracy(pred, true):
    pred, true = check_mask(pred), check_mask(true)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    return float((pred == true).mean())


def dice_score(pred, true):
    """Dice coefficient; two empty masks agree perfectly (1.0)."""
    pred, true = check_mask(pred).astype(bool), check_mask(true).astype(bool)
    denom = pred.sum() + true.sum()
    return 1.0 if denom == 0 else float(2 * (pred & true).sum() / denom)


def iou_score(pred, true):
    pred, true = check_mask(pred).astype(bool), check_mask(true).astype(bool)
    union = (pred | true).sum()
    return 1.0 if union == 0 else float((pred & true).sum() / union)


# --------------------------------------------------------------------------- estimator


def _resize_image(img, size):
    h, w = size
    img = check_image(img).astype(np.float32)
    if img.shape[:2] != (h, w):
        img = cv2.resize(img, (w, h), interpolation=cv2.INTER_LINEAR)
    return img


def _resize_mask(mask, size):
    h, w = size
    mask = check_mask(mask)
    if mask.shape != (h, w):
        mask = cv2.resize(mask, (w, h), interpolation=cv2.INTER_NEAREST)
    return mask


def _to_tensor(images, scale):
    arr = np.stack(images).astype(np.float32) / scale
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


class UNetSegmenter(BaseEstimator):
    """Lesion segmenter: fit on (image, mask) pairs, predict lesion probability maps.

    Images of any size are resized to ``input_size`` (height, width) for the
    network; ``predict_proba`` resizes maps back to each image's native size.
    Training monitors pixel accuracy on the validation set, multiplies the
    learning rate by ``plateau_factor`` after ``plateau_patience`` epochs
    without improvement, and stops at the next plateau. The best weights are
    restored at the end of ``fit`` and, if ``checkpoint_path`` is set,
    written there with a JSON sidecar.
    """

    def __init__(
        self,
        input_size=(224, 320),
        depth=5,
        primary_filters=32,
        dropout_rate=0.4,
        max_epochs=150,
        batch_size=24,
        initial_lr=1e-3,
        plateau_patience=10,
        plateau_factor=0.01,
        max_reductions=1,
        threshold=0.5,
        pixel_scale=255.0,
        checkpoint_path=None,
        random_state=0,
        verbose=False,
    ):
        self.input_size = input_size
        self.depth = depth
        self.primary_filters = primary_filters
        self.dropout_rate = dropout_rate
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.initial_lr = initial_lr
        self.plateau_patience = plateau_patience
        self.plateau_factor = plateau_factor
        self.max_reductions = max_reductions
        self.threshold = threshold
        self.pixel_scale = pixel_scale
        self.checkpoint_path = checkpoint_path
        self.random_state = random_state
        self.verbose = verbose

    @property
    def config(self):
        return SegmenterConfig(tuple(self.input_size), self.depth, self.primary_filters, self.dropout_rate)

    @property
    def schedule(self):
        return TrainSchedule(
            self.max_epochs, self.batch_size, self.initial_lr,
            self.plateau_patience, self.plateau_factor, self.max_reductions,
        )

    def _prepare(self, X, y, ids):
        X, y = list(X), list(y)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} images but {len(y)} masks")
        ids = list(ids) if ids is not None else [str(i) for i in range(len(X))]
        failures = {}
        for i, (img, m) in enumerate(zip(X, y)):
            if np.asarray(img).shape[:2] != np.asarray(m).shape[:2]:
                failures[ids[i]] = f"image {np.asarray(img).shape[:2]} vs mask {np.asarray(m).shape[:2]}"
        if failures:
            raise RecordErrors(failures)
        size = tuple(self.input_size)
        xs = _to_tensor([_resize_image(img, size) for img in X], self.pixel_scale)
        ys = torch.from_numpy(np.stack([_resize_mask(m, size) for m in y]).astype(np.float32))[:, None]
        return xs, ys

    def fit(self, X, y, X_val=None, y_val=None, ids=None):
        """Train on images ``X`` with binary masks ``y``.

        Without a validation set the monitored accuracy is measured on the
        training images in inference mode.
        """
        config = self.config.validate()
        schedule = self.schedule.validate()
        if len(X) == 0:
            raise ValueError("cannot train the segmenter on an empty training set")
        xs, ys = self._prepare(X, y, ids)
        if X_val is not None:
            xv, yv = self._prepare(X_val, y_val, None)
        else:
            xv, yv = xs, ys

        gen = seed_everything(self.random_state)
        model = build_segmenter(config)
        opt = torch.optim.Adam(
            model.parameters(), lr=schedule.initial_lr, betas=schedule.adam_betas, eps=schedule.adam_eps
        )
        loss_fn = nn.BCEWithLogitsLoss()
        ctl = PlateauController(
            schedule.initial_lr, schedule.plateau_patience, schedule.plateau_factor, schedule.max_reductions
        )
        history = TrainingHistory()
        best_state, best_epoch = None, -1
        n = xs.shape[0]

        for epoch in range(schedule.max_epochs):
            lr = opt.param_groups[0]["lr"]
            model.train()
            order = torch.randperm(n, generator=gen)
            tot_loss = tot_correct = 0.0
            for start in range(0, n, schedule.batch_size):
                idx = order[start:start + schedule.batch_size]
                xb, yb = xs[idx], ys[idx]
                out = model(xb)
                loss = loss_fn(out, yb)
                opt.zero_grad()
                loss.backward()
                opt.step()
                tot_loss += loss.item() * len(idx)
                tot_correct += ((out > 0).float() == yb).float().mean().item() * len(idx)
            val_loss, val_acc = self._evaluate(model, xv, yv, loss_fn)
            history.append(
                epoch=epoch, train_loss=tot_loss / n, val_loss=val_loss,
                train_acc=tot_correct / n, val_acc=val_acc, lr=lr,
            )
            improved, action = ctl.step(val_acc)
            if improved:
                best_state, best_epoch = clone_state(model), epoch
            if self.verbose:
                logger.info("epoch %d loss %.4f val_acc %.4f lr %.2g %s", epoch, tot_loss / n, val_acc, lr, action)
            if action == "stop":
                break
            if action == "reduce":
                for g in opt.param_groups:
                    g["lr"] = ctl.lr

        model.load_state_dict(best_state)
        model.eval()
        self.model_ = model
        self.history_ = history
        self.best_score_ = ctl.best
        self.n_epochs_ = len(history)
        digest = config_digest(config, schedule)
        self.checkpoint_ = CheckpointRecord(
            Path(self.checkpoint_path) if self.checkpoint_path else None, best_epoch, ctl.best, digest
        )
        if self.checkpoint_path:
            self.save(self.checkpoint_path, epoch=best_epoch)
        return self

    def _evaluate(self, model, xv, yv, loss_fn):
        model.eval()
        losses, correct = 0.0, 0.0
        with torch.no_grad():
            for start in range(0, xv.shape[0], self.batch_size):
                xb, yb = xv[start:start + self.batch_size], yv[start:start + self.batch_size]
                out = model(xb)
                losses += loss_fn(out, yb).item() * len(xb)
                pred = (torch.sigmoid(out) > self.threshold).float()
                correct += (pred == yb).float().mean().item() * len(xb)
        return losses / xv.shape[0], correct / xv.shape[0]

    def sidecar(self, epoch=None):
        check_is_fitted(self, "model_")
        return {
            "config": asdict(self.config),
            "schedule": asdict(self.schedule),
            "params": {k: v for k, v in self.get_params().items() if k != "checkpoint_path"},
            "epoch": self.checkpoint_.epoch if epoch is None else epoch,
            "monitored_value": self.best_score_,
            "config_digest": config_digest(self.config, self.schedule),
        }

    def save(self, path, epoch=None):
        save_checkpoint(path, self.model_.state_dict(), self.sidecar(epoch))
        return Path(path)

    @classmethod
    def load(cls, path):
        """Rebuild a fitted segmenter from ``path`` and its sidecar JSON."""
        state, sidecar = load_checkpoint(path)
        if not sidecar:
            raise ValueError(f"{path} has no sidecar JSON; cannot rebuild the network")
        est = cls(**sidecar["params"])
        config, schedule = est.config, est.schedule
        if config_digest(config, schedule) != sidecar["config_digest"]:
            raise ValueError(f"config digest mismatch for {path}")
        model = build_segmenter(config)
        try:
            model.load_state_dict(state)
        except RuntimeError as exc:
            raise ValueError(f"weights in {path} do not match the configured graph: {exc}") from exc
        model.eval()
        est.model_ = model
        est.best_score_ = sidecar["monitored_value"]
        est.history_ = None
        est.checkpoint_ = CheckpointRecord(Path(path), sidecar["epoch"], sidecar["monitored_value"], sidecar["config_digest"])
        return est

    def predict_proba(self, X, native_size=True):
        """Lesion probability map per image, in input order.

        Maps are resized back to each image's own size unless
        ``native_size=False``. Returns an array when all outputs share a
        shape, else a list.
        """
        check_is_fitted(self, "model_")
        X = list(X)
        if not X:
            return np.zeros((0,) + tuple(self.input_size))
        size = tuple(self.input_size)
        maps = []
        self.model_.eval()
        with torch.no_grad():
            for start in range(0, len(X), self.batch_size):
                chunk = X[start:start + self.batch_size]
                xb = _to_tensor([_resize_image(img, size) for img in chunk], self.pixel_scale)
                probs = self.model_(xb, logits=False)[:, 0].numpy().astype(np.float64)
                for img, p in zip(chunk, probs):
                    h, w = np.asarray(img).shape[:2]
                    if native_size and (h, w) != size:
                        p = np.clip(cv2.resize(p, (w, h), interpolation=cv2.INTER_LINEAR), 0.0, 1.0)
                    maps.append(p)
        shapes = {m.shape for m in maps}
        return np.stack(maps) if len(shapes) == 1 else maps

    def predict(self, X):
        from .masks import binarize

        return [binarize(p, self.threshold) for p in self.predict_proba(X)]

    def score(self, X, y):
        """Mean pixel accuracy at the decision threshold."""
        return evaluate_segmenter(self, X, y)["pixel_accuracy"]


def predict_prob_map(checkpoint, image):
    """Probability map for one image from a checkpoint path or fitted segmenter."""
    seg = checkpoint if isinstance(checkpoint, UNetSegmenter) else UNetSegmenter.load(checkpoint)
    return seg.predict_proba([image])[0]


def evaluate_segmenter(segmenter, images, masks):
    """Mean pixel accuracy, Dice and IoU of thresholded predictions at native size."""
    images, masks = list(images), list(masks)
    if not images:
        raise ValueError("cannot evaluate on an empty test set")
    preds = segmenter.predict(images)
    acc = [pixel_accuracy(p, t) for p, t in zip(preds, masks)]
    dice = [dice_score(p, t) for p, t in zip(preds, masks)]
    iou = [iou_score(p, t) for p, t in zip(preds, masks)]
    return {
        "n": len(images),
        "pixel_accuracy": float(np.mean(acc)),
        "dice": float(np.mean(dice)),
        "iou": float(np.mean(iou)),
    }
