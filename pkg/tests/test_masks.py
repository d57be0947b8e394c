import json

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from dermpipe.data import synthetic_manifest
from dermpipe.masks import (
    LesionCropper,
    QCPolicy,
    QCVerdict,
    RangeNormalizer,
    binarize,
    connected_components,
    crop_and_resize,
    denormalize_range,
    dilate,
    lesion_bbox,
    normalize_range,
    preprocess,
    qc_mask,
    run_mask_stage,
)
from oracles import flood_fill_count


def disk(shape, center, radius):
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    return (((yy - center[0]) ** 2 + (xx - center[1]) ** 2) <= radius ** 2).astype(np.uint8)


# ----------------------------------------------------------------- binarize

def test_binarize_is_strict():
    assert binarize(np.array([[0.51, 0.50, 0.49]])).tolist() == [[1, 0, 0]]
    assert not binarize(np.zeros((4, 4))).any()
    assert binarize(np.ones((4, 4))).all()


def test_binarize_rejects_out_of_range():
    with pytest.raises(ValueError):
        binarize(np.array([[1.5]]))


# ----------------------------------------------------------------- components

def test_two_blocks():
    m = np.zeros((6, 6), np.uint8)
    m[0:2, 0:2] = 1
    m[4:6, 4:6] = 1
    regions = connected_components(m)
    assert [r.area for r in regions] == [4, 4]
    assert regions[0].bbox == (0, 0, 1, 1) and regions[1].bbox == (4, 4, 5, 5)
    assert regions[1].centroid == (4.5, 4.5)
    assert connected_components(np.zeros((5, 5), np.uint8)) == []


def test_diagonal_connectivity():
    m = np.eye(4, dtype=np.uint8)
    assert len(connected_components(m, 8)) == 1
    assert len(connected_components(m, 4)) == 4


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 0.7), st.sampled_from([4, 8]))
def test_components_match_flood_fill(seed, density, conn):
    m = (np.random.default_rng(seed).random((32, 32)) < density).astype(np.uint8)
    regions = connected_components(m, conn)
    oracle = flood_fill_count(m, conn)
    assert len(regions) == len(oracle)
    assert sorted(r.area for r in regions) == sorted(oracle)
    for r in regions:
        x0, y0, x1, y1 = r.bbox
        assert r.area >= 1 and x0 <= r.centroid[0] <= x1 and y0 <= r.centroid[1] <= y1


# ----------------------------------------------------------------- QC

def test_qc_small_blob():
    m = np.zeros((224, 224), np.uint8)
    m[100:105, 100:110] = 1  # 50 pixels
    v = qc_mask(m, QCPolicy(min_area_fraction=0.005))
    assert (v.status, v.reason) == ("rejected", "area_too_small")


def test_qc_two_large_blobs():
    m = disk((224, 224), (60, 60), 30) | disk((224, 224), (160, 160), 30)
    assert qc_mask(m).reason == "multi_region"


def test_qc_single_centered_blob():
    r = int(np.sqrt(0.2 * 224 * 224 / np.pi))
    m = disk((224, 224), (112, 112), r)
    v = qc_mask(m)
    assert v.accepted and v.reason == "ok" and v.n_regions == 1
    assert v.area_fraction == pytest.approx(0.2, abs=0.01)


def test_qc_empty_and_too_large():
    assert qc_mask(np.zeros((20, 20), np.uint8)).reason == "empty_mask"
    assert qc_mask(np.ones((20, 20), np.uint8)).reason == "area_too_large"


def test_qc_ignores_specks():
    m = disk((224, 224), (112, 112), 40)
    m[5, 5] = 1
    assert qc_mask(m).accepted
    assert qc_mask(m, QCPolicy(small_component_ignore_fraction=0.0)).reason == "multi_region"


def test_verdict_invariant():
    with pytest.raises(ValueError):
        QCVerdict("accepted", "multi_region")
    with pytest.raises(ValueError):
        QCVerdict("rejected", "ok")


def test_policy_bounds():
    with pytest.raises(ValueError):
        QCPolicy(min_area_fraction=0.9, max_area_fraction=0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_qc_random_blob_pairs(seed):
    rng = np.random.default_rng(seed)
    shape = (32, 32)
    r1, r2 = rng.integers(3, 6, 2)
    single = disk(shape, rng.integers(8, 24, 2), r1)
    assert qc_mask(single).accepted
    a = disk(shape, (8, 8), r1)
    b = disk(shape, (24, 24), r2)
    assert qc_mask(a | b).reason == "multi_region"


# ----------------------------------------------------------------- dilation

def test_dilate_single_pixel():
    m = np.zeros((7, 7), np.uint8)
    m[3, 3] = 1
    out = dilate(m, radius=1, iterations=1)
    expected = np.zeros_like(m)
    expected[2:5, 2:5] = 1
    assert np.array_equal(out, expected)
    assert np.array_equal(dilate(m, 1, 0), m)
    big = np.zeros((15, 15), np.uint8)
    big[7, 7] = 1
    assert dilate(big, 2, 2).sum() == 81


def test_dilate_grows_monotonically(rng):
    m = (rng.random((20, 20)) > 0.9).astype(np.uint8)
    out = dilate(m)
    assert np.all(out >= m)


# ----------------------------------------------------------------- crop / resize

def _ramp(h, w):
    yy, xx = np.mgrid[:h, :w]
    return np.stack([xx % 256, yy % 256, (xx + yy) % 256], axis=-1).astype(np.uint8)


def test_crop_bbox_window():
    img = _ramp(200, 200)
    m = np.zeros((200, 200), np.uint8)
    m[20:121, 10:111] = 1
    assert lesion_bbox(m) == (10, 20, 110, 120)
    window = img[20:121, 10:111]
    assert np.array_equal(crop_and_resize(img, m, out_size=101), window)
    out = crop_and_resize(img, m)
    assert out.shape == (224, 224, 3)
    ref = cv2.resize(window.astype(np.float32), (224, 224), interpolation=cv2.INTER_LINEAR)
    assert np.abs(out.astype(float) - ref).max() <= 0.5


def test_crop_full_mask_is_resized_image():
    img = _ramp(50, 70)
    out = crop_and_resize(img, np.ones((50, 70), np.uint8), out_size=64)
    ref = cv2.resize(img.astype(np.float32), (64, 64), interpolation=cv2.INTER_LINEAR)
    assert np.abs(out.astype(float) - ref).max() <= 0.5


def test_crop_non_square_and_background_zeroed():
    img = np.full((60, 90, 3), 200, np.uint8)
    m = np.zeros((60, 90), np.uint8)
    m[10:20, 5:80] = 1
    m[10, 5] = 0
    out = crop_and_resize(img, m, out_size=224)
    assert out.shape == (224, 224, 3)
    assert out[0, 0].tolist() == [0, 0, 0]


def test_crop_empty_mask_fails():
    with pytest.raises(ValueError):
        crop_and_resize(np.zeros((5, 5, 3), np.uint8), np.zeros((5, 5), np.uint8))


# ----------------------------------------------------------------- normalization

def test_normalize_fixed_points():
    img = np.array([0.0, 127.5, 255.0]).reshape(1, 3, 1)
    assert normalize_range(img).ravel().tolist() == [-1.0, 0.0, 1.0]


def test_normalize_constant_warns():
    with pytest.warns(RuntimeWarning):
        out = normalize_range(np.full((4, 4, 3), 9, np.uint8))
    assert not out.any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_normalize_roundtrip(seed):
    img = np.random.default_rng(seed).integers(0, 256, (8, 9, 3))
    if img.min() == img.max():
        return
    out = normalize_range(img)
    assert out.min() == -1.0 and out.max() == 1.0
    assert np.allclose(denormalize_range(out, img.min(), img.max()), img, atol=1e-9)


def test_range_normalizer_transformer(rng):
    X = rng.integers(0, 256, (3, 5, 5, 3))
    out = RangeNormalizer().fit_transform(X)
    assert out.shape == X.shape and np.allclose(out.min(axis=(1, 2, 3)), -1)


def test_preprocess_is_deterministic(rng):
    img = rng.integers(0, 256, (60, 80, 3)).astype(np.uint8)
    m = disk((60, 80), (30, 40), 12)
    a, b = preprocess(img, m), preprocess(img, m)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert a.mask_digest == b.mask_digest
    assert a.pixels.shape == (224, 224, 3)
    assert a.crop_bbox == (40 - 16, 30 - 16, 40 + 16, 30 + 16)


# ----------------------------------------------------------------- cropper estimator

def test_lesion_cropper(rng):
    imgs = rng.integers(0, 256, (3, 40, 40, 3)).astype(np.uint8)
    good = disk((40, 40), (20, 20), 8)
    two = disk((40, 40), (8, 8), 5) | disk((40, 40), (30, 30), 5)
    cropper = LesionCropper(out_size=32)
    out = cropper.fit_transform(imgs[:2], [good, good.astype(float) * 0.9])
    assert out.shape == (2, 32, 32, 3)
    assert all(v.accepted for v in cropper.verdicts_)
    with pytest.raises(ValueError, match="multi_region"):
        cropper.transform(imgs[2:], [two])
    out = LesionCropper(out_size=32, on_reject="full_image").transform(imgs[2:], [two])
    assert out.shape == (1, 32, 32, 3)
    assert LesionCropper().get_params()["out_size"] == 224


# ----------------------------------------------------------------- batch stage

def _images(tmp_path, manifest, rng):
    for r in manifest:
        Image.fromarray(rng.integers(0, 256, (30, 40, 3)).astype(np.uint8)).save(r.image_path)


def _placed(manifest, tmp_path):
    from dataclasses import replace

    recs = tuple(replace(r, image_path=tmp_path / r.image_path.name) for r in manifest)
    return replace(manifest, records=recs)


def test_mask_stage_permissive_removes_nothing(tmp_path, rng):
    m = _placed(synthetic_manifest({"mel": 3, "nv": 4}), tmp_path)
    _images(tmp_path, m, rng)

    def speckle(images):
        return [np.random.default_rng(0).random(im.shape[:2]) for im in images]

    out, summary = run_mask_stage(m, speckle, QCPolicy.permissive(), tmp_path / "out", batch_size=3)
    assert summary.total["removed"] == 0 and summary.total["after"] == 7
    assert all(r.qc_status == "accepted" for r in out)
    assert len(list((tmp_path / "out" / "masks").glob("*_mask.png"))) == 7
    saved = json.loads((tmp_path / "out" / "qc_summary.json").read_text())
    assert {row["class"] for row in saved["rows"]} == {"mel", "nv", "total"}
    assert set(saved["rows"][0]) == {"class", "before", "after", "removed", "removed_fraction", "removed_pct_of_total"}


def test_mask_stage_isolates_unreadable(tmp_path, rng):
    m = _placed(synthetic_manifest({"bcc": 4}), tmp_path)
    _images(tmp_path, m, rng)
    bad = m.records[1]
    bad.image_path.write_bytes(b"not an image")

    def blob(images):
        return [disk(im.shape[:2], (15, 20), 8).astype(float) for im in images]

    out, summary = run_mask_stage(m, blob)
    assert list(summary.failed) == [bad.image_id]
    assert summary.total["after"] == 3
    assert summary.reasons[bad.image_id] == "failed"
    assert [r.qc_status for r in out].count("accepted") == 3


def test_mask_stage_summary_fractions(tmp_path, rng):
    m = _placed(synthetic_manifest({"df": 2, "vasc": 2}), tmp_path)
    _images(tmp_path, m, rng)
    flag = iter([True, False, True, True])

    def mixed(images):
        return [disk(im.shape[:2], (15, 20), 8) * 0.9 if next(flag) else np.zeros(im.shape[:2]) for im in images]

    _, summary = run_mask_stage(m, mixed, batch_size=1)
    df = summary.rows[0]
    assert (df["before"], df["after"], df["removed"]) == (2, 1, 1)
    assert df["removed_fraction"] == 0.5 and df["removed_pct_of_total"] == 25.0
