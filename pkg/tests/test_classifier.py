import numpy as np
import pytest
import torch

from dermpipe.classifier import (
    IMAGENET_WEIGHTS_URL,
    ClassifierConfig,
    DenseNetClassifier,
    HeadConfig,
    _batches,
    build_classifier,
    decide_label,
    predict_proba,
    train_classifier,
)
from dermpipe.data import CLASSES
from dermpipe.masks import normalize_range
from synth import colour_set

SMALL = dict(input_size=32, pretrained=False, batch_size=4, random_state=0)


def _norm(X):
    return np.stack([normalize_range(x) for x in X]).astype(np.float32)


@pytest.fixture(scope="module")
def binary_model():
    X, y = colour_set(8)
    return DenseNetClassifier(classes=["a", "b"], epochs=2, validation_fraction=0, **SMALL).fit(_norm(X), y), _norm(X)


# ----------------------------------------------------------------- graph

def test_head_layer_sequence():
    m = build_classifier(ClassifierConfig(head=HeadConfig(1), pretrained=False))
    assert m.head_layers() == [
        "GlobalAveragePooling2D", "Dense(256, relu)", "BatchNormalization",
        "Dropout(0.25)", "Dense(1)", "Sigmoid",
    ]
    m7 = build_classifier(ClassifierConfig(head=HeadConfig(7), pretrained=False))
    assert m7.head_layers()[-2:] == ["Dense(7)", "Softmax"]


@pytest.mark.parametrize("k,expected", [(1, 263169), (7, 264711)])
def test_head_parameter_count(k, expected):
    m = build_classifier(ClassifierConfig(head=HeadConfig(k), pretrained=False))
    assert m.head_parameter_count() == HeadConfig(k).n_trainable() == expected


def test_output_arity_and_ranges():
    x = torch.randn(3, 3, 64, 64)
    m7 = build_classifier(ClassifierConfig(head=HeadConfig(7), pretrained=False)).eval()
    m1 = build_classifier(ClassifierConfig(head=HeadConfig(1), pretrained=False)).eval()
    with torch.no_grad():
        p7, p1 = m7(x, logits=False), m1(x, logits=False)
    assert p7.shape == (3, 7) and torch.allclose(p7.sum(1), torch.ones(3, dtype=p7.dtype), atol=1e-6)
    assert p1.shape == (3, 1) and bool(((p1 >= 0) & (p1 <= 1)).all())


def test_freeze_backbone():
    m = build_classifier(ClassifierConfig(head=HeadConfig(1), pretrained=False, freeze_backbone=True))
    trainable = sum(p.numel() for p in m.parameters() if p.requires_grad)
    assert trainable == HeadConfig(1).n_trainable()


def test_missing_weights_hint(tmp_path):
    with pytest.raises(FileNotFoundError) as exc:
        build_classifier(ClassifierConfig(weights_path=str(tmp_path / "nope.pth")))
    assert IMAGENET_WEIGHTS_URL in str(exc.value)


def test_weights_file_loads(tmp_path):
    import torchvision

    state = torchvision.models.densenet121(weights=None).state_dict()
    path = tmp_path / "densenet121.pth"
    torch.save(state, path)
    m = build_classifier(ClassifierConfig(weights_path=str(path)))
    key = "denseblock1.denselayer1.conv1.weight"
    assert torch.equal(m.features.state_dict()[key], state["features." + key])


def test_task_hyperparameters():
    b = ClassifierConfig.for_task("mel_vs_nv")
    s = ClassifierConfig.for_task("seven_class")
    assert (b.epochs, b.batch_size, b.learning_rate, b.head.n_outputs) == (30, 16, 1e-4, 1)
    assert (s.epochs, s.batch_size, s.learning_rate, s.head.n_outputs) == (50, 32, 6e-4, 7)
    assert b.decay == s.decay == 1e-6
    est = DenseNetClassifier.for_task("mel_vs_nv")
    assert est.classes == ["nevus", "melanoma"]


def test_batches_merge_trailing_singleton():
    assert _batches(9, 4) == [(0, 4), (4, 9)]
    assert _batches(8, 4) == [(0, 4), (4, 8)]
    assert _batches(1, 4) == [(0, 1)]


# ----------------------------------------------------------------- decide_label

def test_decide_label():
    assert decide_label(0.7, ["neg", "pos"]) == "pos"
    assert decide_label(0.5, ["neg", "pos"]) == "neg"
    p = np.full(7, 0.05)
    p[4] = 0.7
    assert decide_label(p[None], CLASSES)[0] == "mel"
    tie = np.array([[0.1, 0.4, 0.4, 0.1]])
    assert decide_label(tie, list("abcd"))[0] == "b"
    assert decide_label(np.array([0.2, 0.9]), ["n", "p"]).tolist() == ["n", "p"]


# ----------------------------------------------------------------- estimator

def test_predict_contract(binary_model):
    est, X = binary_model
    p = est.predict_proba(X)
    assert p.shape == (8, 2) and np.allclose(p.sum(1), 1)
    assert np.array_equal(p, est.predict_proba(X))
    assert np.allclose(predict_proba(est, X), p[:, 1])
    assert set(est.predict(X)) <= {"a", "b"}
    assert est.predict_proba(np.zeros((0, 32, 32, 3))).shape == (0, 2)
    assert len(est.predict([])) == 0


def test_wrong_input_size(binary_model):
    est, _ = binary_model
    with pytest.raises(ValueError, match="spatial size"):
        est.predict_proba(np.zeros((2, 64, 64, 3), np.float32))
    with pytest.raises(ValueError, match="normalized"):
        est.predict_proba(np.full((1, 32, 32, 3), 200, np.float32))


def test_history_and_score(binary_model):
    est, X = binary_model
    assert len(est.history_) == 2
    assert 0 <= est.score(X, ["a", "b"] * 4) <= 1


def test_save_load(binary_model, tmp_path):
    est, X = binary_model
    path = est.save(tmp_path / "model.pt")
    again = DenseNetClassifier.load(path)
    assert np.array_equal(again.predict_proba(X), est.predict_proba(X))
    assert list(again.classes_) == ["a", "b"]


def test_absent_class_named():
    X, y = colour_set(4)
    with pytest.raises(ValueError, match="'c'"):
        DenseNetClassifier(classes=["a", "b", "c"], **SMALL).fit(_norm(X), y)


def test_seven_class_probabilities_sum_to_one():
    rng = np.random.default_rng(0)
    X = _norm(rng.integers(0, 256, (14, 32, 32, 3)))
    y = list(CLASSES) * 2
    est = DenseNetClassifier(classes=list(CLASSES), epochs=1, validation_fraction=0, **SMALL).fit(X, y)
    p = predict_proba(est, X)
    assert p.shape == (14, 7) and np.allclose(p.sum(1), 1, atol=1e-6)


def test_duplicated_set_matches_doubled_batches():
    X, y = colour_set(8, seed=3)
    X = _norm(X)
    common = dict(classes=["a", "b"], validation_fraction=0, shuffle=False, **SMALL)
    single = DenseNetClassifier(epochs=2, **common).fit(X, y)
    double = DenseNetClassifier(epochs=1, **common).fit(np.concatenate([X, X]), np.concatenate([y, y]))
    l0, l1 = single.history_.column("train_loss")
    assert double.history_.column("train_loss")[0] == pytest.approx((l0 + l1) / 2, rel=1e-9)


def test_validation_holdout_sizes():
    X, y = colour_set(20)
    est = DenseNetClassifier(classes=["a", "b"], validation_fraction=0.1, **SMALL)
    _, y_tr, X_va, y_va = est._holdout(X, list(y), 2)
    assert len(X_va) == 2 and sorted(y_va) == ["a", "b"] and len(y_tr) == 18
    with pytest.warns(UserWarning, match="too small"):
        assert est._holdout(X[:3], list(y[:3]), 2)[2] is None


def test_train_classifier_record(tmp_path):
    X, y = colour_set(8)
    y = np.where(y == "a", "nevus", "melanoma")
    est, record, history = train_classifier(
        _norm(X), y, None, None, "mel_vs_nv", seed=1, fold_index=2, out_path=tmp_path / "m.pt",
        epochs=1, **{k: v for k, v in SMALL.items() if k != "random_state"},
    )
    assert record.task_id == "mel_vs_nv" and record.fold_index == 2
    assert record.weights_path.exists() and (tmp_path / "m.json").exists()
    assert list(est.classes_) == ["nevus", "melanoma"] and len(history) == 1
