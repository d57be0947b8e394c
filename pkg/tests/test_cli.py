import json
import time

import pytest
import yaml

from dermpipe.cli import main
from dermpipe.fixtures import make_fixture


@pytest.fixture(scope="module")
def dry_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("dry")
    start = time.time()
    assert main(["reproduce", "table9", "--dry-run", "--out", str(out)]) == 0
    assert main(["reproduce", "table10", "--dry-run", "--out", str(out)]) == 0
    return out, time.time() - start


def _cfg(out):
    return str(out / "config.effective.yaml")


def test_dry_run_within_budget(dry_run):
    _, elapsed = dry_run
    assert elapsed < 300


def test_dry_run_layout(dry_run):
    out, _ = dry_run
    for rel in ("ingest/manifest_isic2018.json", "ingest/manifest_ham10000.json", "splits/isic2018_holdout.json",
                "segmenter/unet.pt", "segmenter/unet.json", "segmenter/history.csv", "qc_summary.json",
                "splits/mel_vs_nv_folds.json", "splits/seven_class_holdout.json"):
        assert (out / rel).exists(), rel
    assert len(list((out / "masks").glob("*_mask.png"))) == 32
    history = (out / "segmenter" / "history.csv").read_text().splitlines()
    assert history[0] == "epoch,train_loss,val_loss,train_acc,val_acc,lr"
    for fold in range(5):
        d = out / "runs" / "mel_vs_nv" / f"fold{fold}"
        assert all((d / f).exists() for f in ("model.pt", "model.json", "history.csv", "predictions.csv"))


def test_seven_class_report_files(dry_run):
    out, _ = dry_run
    files = sorted(p.name for p in (out / "reports" / "seven_class").iterdir())
    assert sum(f.startswith("roc_") for f in files) == 7
    assert files.count("cm_seven_class.png") == 1 and files.count("report_seven_class.json") == 1
    assert len(files) == 9


def test_binary_report_mean_std(dry_run):
    out, _ = dry_run
    report = json.loads((out / "reports" / "mel_vs_nv" / "report_mel_vs_nv.json").read_text())
    assert report["folds"] == 5
    for name in ("accuracy", "sensitivity", "specificity", "auc"):
        assert "mean ± std" in report["metrics"][name]
    assert set(report["per_class"]) == {"nevus", "melanoma"}


def test_evaluate_rerun_is_byte_identical(dry_run):
    out, _ = dry_run
    path = out / "reports" / "seven_class" / "report_seven_class.json"
    before = path.read_bytes()
    assert main(["evaluate", "--config", _cfg(out), "--task", "seven_class", "--force"]) == 0
    assert path.read_bytes() == before


def test_second_run_is_cache_hit(dry_run, capsys):
    out, _ = dry_run
    marker = out / "stages" / "train-seg.json"
    stamp = marker.stat().st_mtime_ns
    assert main(["train-seg", "--config", _cfg(out)]) == 0
    assert "ran" not in json.loads(capsys.readouterr().out)
    assert marker.stat().st_mtime_ns == stamp
    assert main(["ingest", "--config", _cfg(out), "--force"]) == 0
    assert json.loads(capsys.readouterr().out)["ran"] is True


def test_stale_upstream_exit_code(dry_run, tmp_path, capsys):
    out, _ = dry_run
    cfg = yaml.safe_load((out / "config.effective.yaml").read_text())
    cfg["classifier"]["epochs"] = 3
    path = tmp_path / "changed.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["evaluate", "--config", str(path), "--task", "mel_vs_nv"]) == 2
    err = capsys.readouterr().err
    assert "train-clf" in err and "stale" in err


def test_evaluate_without_model(tmp_path, capsys):
    assert main(["evaluate", "--task", "mel_vs_nv", "--out", str(tmp_path)]) == 2
    assert "dermpipe train-clf --task mel_vs_nv" in capsys.readouterr().err


def test_split_isic_sizes(tmp_path, capsys):
    paths = make_fixture(tmp_path / "fx", n_isic=2594, ham_counts={}, size=(8, 8))
    cfg = {"data": {"isic_root": str(paths["isic_root"]), "isic_metadata": str(paths["isic_metadata"])},
           "out": str(tmp_path / "run")}
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["ingest", "--config", str(path)]) == 0
    assert main(["split", "--config", str(path)]) == 0
    out = json.loads(capsys.readouterr().out.split("\n}\n", 1)[1])
    assert out["outputs"]["sizes"] == [1867, 208, 519]


def test_missing_images_exit_code(tmp_path, capsys):
    paths = make_fixture(tmp_path / "fx", n_isic=3, ham_counts={"mel": 2}, size=(8, 8))
    next((paths["ham_root"] / "images").glob("*.jpg")).unlink()
    cfg = {"data": {k: str(v) for k, v in paths.items()}, "out": str(tmp_path / "run")}
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["ingest", "--config", str(path)]) == 2
    assert "missing image" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("classifier:\n  epochs_typo: 3\n")
    assert main(["ingest", "--config", str(path), "--out", str(tmp_path)]) == 1


def test_fixture_command(tmp_path, capsys):
    assert main(["fixture", str(tmp_path / "fx")]) == 0
    paths = json.loads(capsys.readouterr().out)
    assert set(paths) == {"isic_root", "isic_metadata", "ham_root", "ham_metadata"}


def test_reproduce_table1_and_table4(dry_run, capsys):
    out, _ = dry_run
    assert main(["reproduce", "table1", "--dry-run", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "holdout\t22\t3\t7" in text
    assert main(["reproduce", "table4", "--dry-run", "--out", str(out)]) == 0
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines() if line.startswith("total")]
    assert rows and rows[0][1] == "32"
