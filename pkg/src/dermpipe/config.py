"""Run configuration: one YAML file per run, CLI flags override, effective config saved next to outputs."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml


@dataclass
class DataConfig:
    isic_root: str | None = None
    isic_metadata: str | None = None
    ham_root: str | None = None
    ham_metadata: str | None = None


@dataclass
class SplitConfig:
    isic_ratios: list = field(default_factory=lambda: [0.70, 0.10, 0.20])
    isic_mode: str = "nested"
    holdout_ratios: list = field(default_factory=lambda: [0.70, 0.13, 0.17])
    holdout_mode: str = "flat"
    k: int = 5


@dataclass
class SegmenterSection:
    input_size: list = field(default_factory=lambda: [224, 320])
    depth: int = 5
    primary_filters: int = 32
    dropout_rate: float = 0.4
    max_epochs: int = 150
    batch_size: int = 24
    initial_lr: float = 1e-3
    plateau_patience: int = 10
    plateau_factor: float = 0.01
    max_reductions: int = 1


@dataclass
class QCSection:
    threshold: float = 0.5
    min_area_fraction: float = 0.005
    max_area_fraction: float = 0.95
    small_component_ignore_fraction: float = 0.002
    connectivity: int = 8


@dataclass
class PreprocessSection:
    dilation_radius: int = 2
    dilation_iterations: int = 2
    out_size: int = 224


@dataclass
class ClassifierSection:
    weights_path: str | None = None
    pretrained: bool = True
    freeze_backbone: bool = False
    input_size: int = 224
    epochs: int | None = None  # None: task default (30 binary, 50 seven-class)
    batch_size: int | None = None
    learning_rate: float | None = None
    decay: float = 1e-6
    validation_fraction: float = 0.1
    class_weight: str | None = None
    augment: bool = False


SECTIONS = {
    "data": DataConfig,
    "split": SplitConfig,
    "segmenter": SegmenterSection,
    "qc": QCSection,
    "preprocess": PreprocessSection,
    "classifier": ClassifierSection,
}


@dataclass
class PipelineConfig:
    seed: int = 0
    task: str = "mel_vs_nv"
    out: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    segmenter: SegmenterSection = field(default_factory=SegmenterSection)
    qc: QCSection = field(default_factory=QCSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, value in d.items():
            if name in SECTIONS:
                section_cls = SECTIONS[name]
                bad = set(value or {}) - {f.name for f in fields(section_cls)}
                if bad:
                    raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
                kwargs[name] = section_cls(**(value or {}))
            else:
                kwargs[name] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def override(self, dotted: dict):
        """Apply ``{"classifier.epochs": 2, "seed": 1}``-style overrides; returns a new config."""
        d = self.to_dict()
        for key, value in dotted.items():
            if value is None:
                continue
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ValueError(f"unknown config key {key!r}")
            node[leaf] = value
        return PipelineConfig.from_dict(d)


def dry_run_config(fixture_root, out):
    """Tiny settings that exercise every stage on the synthetic fixture within minutes on CPU."""
    root = Path(fixture_root)
    return PipelineConfig(
        seed=0,
        out=str(out),
        data=DataConfig(
            isic_root=str(root / "isic2018"), isic_metadata=str(root / "isic2018" / "metadata.csv"),
            ham_root=str(root / "ham10000"), ham_metadata=str(root / "ham10000" / "HAM10000_metadata.csv"),
        ),
        segmenter=SegmenterSection(
            input_size=[32, 48], depth=2, primary_filters=8, max_epochs=15, batch_size=8,
            initial_lr=1e-2, plateau_patience=3,
        ),
        qc=QCSection(small_component_ignore_fraction=0.01, min_area_fraction=0.02),
        preprocess=PreprocessSection(dilation_radius=1, dilation_iterations=1, out_size=32),
        classifier=ClassifierSection(
            pretrained=False, input_size=32, epochs=2, batch_size=8, learning_rate=1e-3,
            validation_fraction=0.2,
        ),
    )
