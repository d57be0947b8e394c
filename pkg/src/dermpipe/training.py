"""Training-loop plumbing shared by the segmenter and the classifier."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .io import atomic_write_bytes, atomic_write_text


def config_digest(*configs):
    """Stable short hash of one or more dataclass / dict configs."""
    payload = [asdict(c) if hasattr(c, "__dataclass_fields__") else c for c in configs]
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class PlateauController:
    """Reduce-on-plateau then stop, tracking a metric that should increase.

    After ``patience`` consecutive epochs without improvement the learning
    rate is multiplied by ``factor``; once ``max_reductions`` reductions have
    been spent, the next plateau ends training.
    """

    def __init__(self, lr, patience=10, factor=0.01, max_reductions=1, min_delta=0.0):
        if not 0 < factor < 1:
            raise ValueError(f"factor must lie in (0, 1), got {factor}")
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.max_reductions = max_reductions
        self.min_delta = min_delta
        self.best = -math.inf
        self.wait = 0
        self.reductions = 0
        self.stopped = False

    def step(self, value):
        """Feed one epoch's metric; returns ``(improved, action)``.

        ``action`` is ``"continue"``, ``"reduce"`` or ``"stop"``.
        """
        if self.stopped:
            raise RuntimeError("controller already stopped")
        if value > self.best + self.min_delta:
            self.best = value
            self.wait = 0
            return True, "continue"
        self.wait += 1
        if self.wait < self.patience:
            return False, "continue"
        self.wait = 0
        if self.reductions < self.max_reductions:
            self.reductions += 1
            self.lr *= self.factor
            return False, "reduce"
        self.stopped = True
        return False, "stop"


HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc", "lr")


@dataclass
class TrainingHistory:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append({k: row.get(k) for k in HISTORY_FIELDS})

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: ("" if v is None else v) for k, v in r.items()})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        out = cls()
        for r in csv.DictReader(io.StringIO(text)):
            out.rows.append(
                {k: (None if r[k] == "" else (int(r[k]) if k == "epoch" else float(r[k]))) for k in HISTORY_FIELDS}
            )
        return out


@dataclass
class CheckpointRecord:
    weights_path: Path
    epoch: int
    monitored_value: float
    config_digest: str
    sidecar: dict = field(default_factory=dict)

    @property
    def sidecar_path(self):
        return Path(self.weights_path).with_suffix(".json")


def save_checkpoint(path, state_dict, sidecar):
    """Write weights then their sidecar JSON, each atomically (temp file + rename)."""
    path = Path(path)
    buf = io.BytesIO()
    torch.save(state_dict, buf)
    atomic_write_bytes(path, buf.getvalue())
    atomic_write_text(path.with_suffix(".json"), json.dumps(sidecar, indent=2, sort_keys=True, default=str))


def load_checkpoint(path):
    """Return ``(state_dict, sidecar)``; raises ``ValueError`` on unreadable weights."""
    path = Path(path)
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001 - torch raises assorted types for bad files
        raise ValueError(f"corrupt or unreadable weights file {path}: {exc}") from exc
    sidecar_path = path.with_suffix(".json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    return state, sidecar


def clone_state(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def seed_everything(seed):
    torch.manual_seed(seed)
    g = torch.Generator()
    g.manual_seed(seed)
    return g
