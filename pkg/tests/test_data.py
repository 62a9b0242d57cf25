import numpy as np
import pytest

from permalign.data import (
    DataFormatError,
    Dataset,
    batches,
    blob_centers,
    glyph_bundle,
    load_data,
    load_idx,
    load_idx_dir,
    read_idx_raw,
    render_glyphs,
    synth_blobs,
    synth_bundle,
    write_glyph_idx,
    write_idx_images,
    write_idx_labels,
)


def test_minimal_idx_file(tmp_path):
    write_idx_images(tmp_path / "i", np.array([[[255]]], dtype=np.uint8))
    write_idx_labels(tmp_path / "l", np.array([7], dtype=np.uint8))
    assert (tmp_path / "i").read_bytes() == bytes.fromhex("00000803 00000001 00000001 00000001 ff")
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.features.shape == (1, 1) and ds.labels.tolist() == [7]


def test_idx_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(9, 5, 4), dtype=np.uint8)
    labs = rng.integers(0, 10, size=9, dtype=np.uint8)
    write_idx_images(tmp_path / "i", imgs)
    write_idx_labels(tmp_path / "l", labs)
    a, b = read_idx_raw(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(a, imgs)
    np.testing.assert_array_equal(b, labs)


def test_idx_errors(tmp_path):
    write_idx_images(tmp_path / "i", np.zeros((10, 2, 2), dtype=np.uint8))
    write_idx_labels(tmp_path / "l", np.zeros(9, dtype=np.uint8))
    with pytest.raises(DataFormatError, match="count"):
        load_idx(tmp_path / "i", tmp_path / "l")
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(tmp_path / "l", tmp_path / "l")
    (tmp_path / "t").write_bytes((tmp_path / "i").read_bytes()[:-3])
    with pytest.raises(DataFormatError, match="truncated"):
        load_idx(tmp_path / "t", tmp_path / "l")


def test_idx_standardisation_uses_train_stats(tmp_path):
    write_glyph_idx(tmp_path, 300, 100, seed=2)
    bundle = load_idx_dir(tmp_path)
    assert abs(bundle.train.features.mean()) < 1e-6
    assert abs(bundle.train.features.std() - 1) < 1e-6
    assert abs(bundle.test.features.mean()) > 1e-9


def test_glyph_bundle_equals_idx_path(tmp_path):
    write_glyph_idx(tmp_path, 120, 40, seed=5)
    a, b = glyph_bundle(120, 5, n_test=40), load_idx_dir(tmp_path)
    np.testing.assert_array_equal(a.train.features, b.train.features)
    np.testing.assert_array_equal(a.test.labels, b.test.labels)


def test_glyphs_deterministic_and_balanced():
    x1, y1 = render_glyphs(50, 1)
    x2, _ = render_glyphs(50, 1)
    x3, _ = render_glyphs(50, 1, stream=1)
    assert x1.dtype == np.uint8 and x1.shape == (50, 28, 28)
    np.testing.assert_array_equal(x1, x2)
    assert not np.array_equal(x1, x3)
    assert np.bincount(y1).tolist() == [5] * 10


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    cents = np.stack([train.features[train.labels == c].mean(0) for c in range(train.n_classes)])
    d = ((test.features[:, None, :] - cents[None]) ** 2).sum(-1)
    return float((d.argmin(1) == test.labels).mean())


def test_blobs_separable_by_linear_oracle():
    b = synth_bundle(500, 20, 4, separation=30.0, seed=0, n_test=200)
    assert nearest_centroid_accuracy(b.train, b.test) == 1.0


def test_blobs_properties():
    ds = synth_blobs(103, 8, 5, 4.0, seed=3)
    counts = np.bincount(ds.labels, minlength=5)
    assert counts.max() - counts.min() <= 1
    np.testing.assert_array_equal(ds.features, synth_blobs(103, 8, 5, 4.0, seed=3).features)
    c = blob_centers(8, 5, 4.0, 3)
    dist = np.sqrt(((c[:, None] - c[None]) ** 2).sum(-1))
    assert dist[np.triu_indices(5, 1)].min() >= 4.0


def test_blobs_infeasible_separation():
    with pytest.raises(ValueError, match="could not place"):
        blob_centers(1, 10, 100.0, 0, max_tries=5)
    with pytest.raises(ValueError):
        synth_blobs(10, 2, 1, 1.0, 0)


def test_bundle_standardised_per_feature():
    b = synth_bundle(400, 6, 3, 3.0, seed=1)
    np.testing.assert_allclose(b.train.features.mean(0), 0, atol=1e-6)
    np.testing.assert_allclose(b.train.features.std(0), 1, atol=1e-6)


def test_load_data_uris(tmp_path, monkeypatch):
    b = load_data("synth://blobs?n=50&d=3&classes=2&sep=2&seed=1&n_test=10")
    assert len(b.train) == 50 and len(b.test) == 10 and b.train.dim == 3
    with pytest.raises(ValueError, match="unknown synth"):
        load_data("synth://blobs?n=5&bogus=1")
    write_glyph_idx(tmp_path / "g", 20, 10, seed=0)
    monkeypatch.setenv("PERMALIGN_DATA_DIR", str(tmp_path))
    assert len(load_data("g").train) == 20
    assert len(load_data(f"idx://{tmp_path / 'g'}").test) == 10
    with pytest.raises(FileNotFoundError):
        load_data("missing")


def test_batches_partition_and_determinism():
    for n, bs in [(10, 3), (7, 7), (5, 100)]:
        bl = batches(n, bs, seed=4, epoch=2)
        assert sorted(np.concatenate(bl).tolist()) == list(range(n))
        assert all(len(b) == bs for b in bl[:-1])
        assert [b.tolist() for b in bl] == [b.tolist() for b in batches(n, bs, 4, 2)]
    assert len(batches(5, 100, 0, 0)) == 1
    assert batches(50, 50, 0, 0)[0].tolist() != batches(50, 50, 0, 1)[0].tolist()
    with pytest.raises(ValueError):
        batches(5, 0, 0, 0)


def test_dataset_validation():
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 3)), np.array([0, 5]), 3)
    with pytest.raises(DataFormatError):
        Dataset(np.array([[np.inf]]), np.array([0]), 1)
