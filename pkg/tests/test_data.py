import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathrobust import data as pd


def test_exact_class_split():
    ds = pd.generate_synthetic(10, seed=1, balance=0.5)
    assert (ds.labels == 1).sum() == 5 and (ds.labels == 0).sum() == 5
    assert ds.manifest["counts"] == {"0": 5, "1": 5}


def test_generation_deterministic():
    a = pd.generate_synthetic(12, seed=9, balance=0.5)
    b = pd.generate_synthetic(12, seed=9, balance=0.5)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    c = pd.generate_synthetic(12, seed=10, balance=0.5)
    assert not np.array_equal(a.images, c.images)


def test_generated_pixels_and_labels_in_range():
    ds = pd.generate_synthetic(20, seed=2, balance=0.4)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert np.isfinite(ds.images).all()
    assert set(np.unique(ds.labels)) <= {0, 1}
    assert ds.images.dtype == np.float32


def test_tumorlike_patches_are_darker():
    # 6-12 hematoxylin blobs vs at most 2 leaves a mean-intensity gap
    ds = pd.generate_synthetic(40, seed=3, balance=0.5)
    m1 = ds.images[ds.labels == 1].mean()
    m0 = ds.images[ds.labels == 0].mean()
    assert m1 < m0


def test_invalid_parameters():
    with pytest.raises(ValueError):
        pd.generate_synthetic(1, seed=0)
    with pytest.raises(ValueError):
        pd.generate_synthetic(10, seed=0, balance=0.0)
    with pytest.raises(ValueError):
        pd.generate_synthetic(10, seed=0, balance=1.0)


# -- disk round trip -----------------------------------------------------------


def test_write_read_roundtrip_within_quantization(tmp_path):
    ds = pd.generate_synthetic(8, seed=4)
    pd.write_dataset(ds, tmp_path)
    back = pd.read_dataset(tmp_path)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.ids, ds.ids)
    assert np.abs(back.images - ds.images).max() <= 1 / 510 + 1e-9


def test_written_files_match_manifest(tmp_path):
    ds = pd.generate_synthetic(9, seed=5, balance=0.4)
    pd.write_dataset(ds, tmp_path)
    files = sorted(p.name for cls in (0, 1) for p in (tmp_path / f"class_{cls}").glob("*.png"))
    assert len(files) == 9
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["counts"] == ds.manifest["counts"]
    assert manifest["generator_version"] == pd.GENERATOR_VERSION


def test_missing_manifest_raises(tmp_path):
    with pytest.raises(pd.DatasetManifestError):
        pd.read_dataset(tmp_path)


def test_tampered_manifest_count_raises(tmp_path):
    ds = pd.generate_synthetic(6, seed=6)
    pd.write_dataset(ds, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["counts"]["1"] += 1
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(pd.DatasetCountError):
        pd.read_dataset(tmp_path)


def test_undecodable_png_raises(tmp_path):
    ds = pd.generate_synthetic(6, seed=7)
    pd.write_dataset(ds, tmp_path)
    victim = next((tmp_path / "class_1").glob("*.png"))
    victim.write_bytes(b"not a png at all")
    with pytest.raises(pd.DatasetDecodeError):
        pd.read_dataset(tmp_path)


def test_write_is_byte_deterministic(tmp_path):
    ds = pd.generate_synthetic(5, seed=8)
    d1, d2 = tmp_path / "a", tmp_path / "b"
    pd.write_dataset(ds, d1)
    pd.write_dataset(ds, d2)
    for p1 in sorted(d1.rglob("*")):
        if p1.is_file():
            p2 = d2 / p1.relative_to(d1)
            assert p1.read_bytes() == p2.read_bytes()


# -- splitting --------------------------------------------------------------------


def test_stratified_split_counts():
    ds = pd.generate_synthetic(100, seed=9, balance=0.5)
    train, test = pd.split(ds, 0.8, seed=9)
    assert (train.labels == 0).sum() == 40 and (train.labels == 1).sum() == 40
    assert (test.labels == 0).sum() == 10 and (test.labels == 1).sum() == 10


def test_split_deterministic_and_partition():
    ds = pd.generate_synthetic(30, seed=10, balance=0.5)
    t1, e1 = pd.split(ds, 0.7, seed=11)
    t2, e2 = pd.split(ds, 0.7, seed=11)
    assert np.array_equal(t1.ids, t2.ids) and np.array_equal(e1.ids, e2.ids)
    combined = sorted(np.concatenate([t1.ids, e1.ids]).tolist())
    assert combined == sorted(ds.ids.tolist())
    assert set(t1.ids.tolist()).isdisjoint(e1.ids.tolist())


def test_split_rejects_tiny_class():
    ds = pd.generate_synthetic(12, seed=12, balance=0.5)
    ds.labels[:] = 0
    ds.labels[0] = 1  # one lone class-1 sample
    with pytest.raises(ValueError, match="fewer than 2"):
        pd.split(ds, 0.5, seed=0)
    with pytest.raises(ValueError):
        pd.split(ds, 1.5, seed=0)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_split_partition_property(n, seed):
    ds = pd.generate_synthetic(max(n, 4), seed=13, balance=0.5)
    train, test = pd.split(ds, 0.5, seed=seed)
    assert len(train) + len(test) == len(ds)
    assert set(train.ids.tolist()).isdisjoint(test.ids.tolist())
