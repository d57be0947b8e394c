import json
import os

import numpy as np
import pytest

from dermpipe.data import CLASSES
from dermpipe.report import evaluate_folds, prediction_frame, render_report


def _binary_fold(rng, n=20):
    labels = ["nevus", "melanoma"]
    true = [labels[i] for i in rng.integers(0, 2, n)]
    true[:2] = labels
    p = np.clip(np.array([0.7 if t == "melanoma" else 0.3 for t in true]) + rng.normal(0, 0.25, n), 0, 1)
    pred = ["melanoma" if x > 0.5 else "nevus" for x in p]
    return prediction_frame([f"id{i}" for i in range(n)], true, pred, p, labels)


def test_prediction_frame_columns(rng):
    df = _binary_fold(rng, 4)
    assert list(df.columns) == ["image_id", "true_label", "pred_label", "score_nevus", "score_melanoma"]
    assert np.allclose(df["score_nevus"] + df["score_melanoma"], 1)


def test_binary_fold_aggregation(rng):
    frames = [_binary_fold(rng) for _ in range(5)]
    result = evaluate_folds(frames, "mel_vs_nv")
    acc = result.metrics["accuracy"]
    per_fold = [float((f["true_label"] == f["pred_label"]).mean()) for f in frames]
    assert acc["per_fold"] == pytest.approx(per_fold)
    assert acc["mean"] == pytest.approx(np.mean(per_fold))
    assert acc["std"] == pytest.approx(np.std(per_fold, ddof=1))
    assert acc["mean ± std"] == f"{100 * np.mean(per_fold):.2f} ± {100 * np.std(per_fold, ddof=1):.2f}"
    assert result.confusion.counts.sum() == 100
    recall = result.per_class["melanoma"]["recall"]["per_fold"]
    assert recall == pytest.approx(result.metrics["sensitivity"]["per_fold"])


def test_seven_class_report_files(rng, tmp_path):
    n = 35
    true = list(CLASSES) * 5
    probs = rng.dirichlet(np.ones(7), n)
    pred = [CLASSES[i] for i in probs.argmax(1)]
    frame = prediction_frame(range(n), true, pred, probs, CLASSES)
    result = evaluate_folds([frame], "seven_class")
    paths = render_report(result, tmp_path / "r")
    names = sorted(p.name for p in paths)
    assert len(names) == 9 and sum(n.startswith("roc_seven_class_") for n in names) == 7
    first = (tmp_path / "r" / "report_seven_class.json").read_bytes()
    render_report(evaluate_folds([frame], "seven_class"), tmp_path / "r")
    assert (tmp_path / "r" / "report_seven_class.json").read_bytes() == first
    report = json.loads(first)
    assert set(report["per_class"]["mel"]) == {"recall", "auc", "precision", "f1"}
    assert report["folds"] == 1 and report["metrics"]["f1_micro"]["std"] is None


def test_binary_report_has_one_roc(rng, tmp_path):
    result = evaluate_folds([_binary_fold(rng) for _ in range(2)], "mel_vs_nv")
    names = {p.name for p in render_report(result, tmp_path)}
    assert names == {"report_mel_vs_nv.json", "cm_mel_vs_nv.png", "roc_mel_vs_nv_melanoma.png"}


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_directory(rng, tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    with pytest.raises(OSError):
        render_report(evaluate_folds([_binary_fold(rng)], "mel_vs_nv"), locked)


def test_unwritable_path_is_a_file(rng, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        render_report(evaluate_folds([_binary_fold(rng)], "mel_vs_nv"), blocker)
