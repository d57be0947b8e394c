"""Two-stage dermatoscopic lesion pipeline: U-Net segmentation, mask QC and cropping, DenseNet-121 classification."""

from .classifier import DenseNetClassifier, build_classifier, decide_label
from .data import (
    TASKS,
    DatasetManifest,
    FoldPlan,
    ImageRecord,
    SplitPlan,
    TaskGrouping,
    apply_grouping,
    load_manifest,
    make_folds,
    make_holdout_split,
)
from .masks import (
    LesionCropper,
    QCPolicy,
    RangeNormalizer,
    binarize,
    connected_components,
    crop_and_resize,
    dilate,
    normalize_range,
    qc_mask,
    run_mask_stage,
)
from .metrics import aggregate_folds, binary_metrics, confusion_matrix, multiclass_metrics, roc_auc
from .segmentation import UNetSegmenter, build_segmenter, evaluate_segmenter, predict_prob_map

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest",
    "DenseNetClassifier",
    "FoldPlan",
    "ImageRecord",
    "LesionCropper",
    "QCPolicy",
    "RangeNormalizer",
    "SplitPlan",
    "TASKS",
    "TaskGrouping",
    "UNetSegmenter",
    "aggregate_folds",
    "apply_grouping",
    "binarize",
    "binary_metrics",
    "build_classifier",
    "build_segmenter",
    "confusion_matrix",
    "connected_components",
    "crop_and_resize",
    "decide_label",
    "dilate",
    "evaluate_segmenter",
    "load_manifest",
    "make_folds",
    "make_holdout_split",
    "multiclass_metrics",
    "normalize_range",
    "predict_prob_map",
    "qc_mask",
    "roc_auc",
    "run_mask_stage",
]
