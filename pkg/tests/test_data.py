import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldb.data import (Dataset, batches, epoch_permutation, load_csv, load_idx_images, prefetch,
                      standardize, synth_blobs, write_csv, write_idx_images)
from ldb.errors import DataError, FormatError
from ldb.network import Dense, Network, build_preset
from ldb.trainer import evaluate, train_baseline


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload))


@pytest.fixture
def idx_pair(tmp_path):
    images, labels = tmp_path / "img.idx", tmp_path / "lbl.idx"
    write_idx(images, 0x803, (2, 2, 3), [0, 255, 51, 102, 0, 0, 1, 2, 3, 4, 5, 255])
    write_idx(labels, 0x801, (2,), [1, 0])
    return images, labels


def test_blobs_deterministic():
    a, b = synth_blobs(seed=4), synth_blobs(seed=4)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.train_idx, b.train_idx)
    assert not np.array_equal(a.features, synth_blobs(seed=5).features)


def test_blobs_split_is_80_20_partition():
    ds = synth_blobs(n=1000)
    assert len(ds.train_idx) == 800 and len(ds.val_idx) == 200
    assert sorted(np.concatenate([ds.train_idx, ds.val_idx]).tolist()) == list(range(1000))


def test_blobs_noiseless_linearly_separable():
    # a linear classifier trained by the baseline reaches 100% validation accuracy
    ds = synth_blobs(n=400, classes=4, dim=16, noise_sigma=0.0, seed=1)
    net = Network([Dense(16, 4)], (16,))
    net.init_params(0)
    train_baseline(net, ds, 0.5, 32, 20)
    assert evaluate(net, ds) == 1.0


def test_blobs_errors():
    with pytest.raises(DataError):
        synth_blobs(n=2, classes=3)
    with pytest.raises(DataError):
        synth_blobs(noise_sigma=-1)


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), [0, 1], 2, np.arange(2), np.arange(0))
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), [0, 2], 2, np.arange(2), np.arange(0))


def test_idx_fixture(idx_pair):
    ds = load_idx_images(*idx_pair, val_fraction=0.5)
    assert ds.features.shape == (2, 1, 2, 3)
    assert ds.features[0, 0, 0, 1] == 1.0
    assert ds.features[0, 0, 0, 2] == 51 / 255
    assert ds.labels.tolist() == [1, 0]
    assert ds.classes == 2


def test_idx_count_mismatch(tmp_path, idx_pair):
    labels = tmp_path / "short.idx"
    write_idx(labels, 0x801, (1,), [0])
    with pytest.raises(DataError, match="2 images but 1 labels"):
        load_idx_images(idx_pair[0], labels)


def test_idx_bad_magic(tmp_path, idx_pair):
    bad = tmp_path / "bad.idx"
    write_idx(bad, 0x802, (2,), [1, 0])
    with pytest.raises(FormatError, match="offset 0"):
        load_idx_images(idx_pair[0], bad)


def test_idx_truncated(tmp_path):
    img = tmp_path / "t.idx"
    write_idx(img, 0x803, (2, 2, 3), [0] * 7)
    with pytest.raises(FormatError, match="offset 23"):
        load_idx_images(img, img)
    hdr = tmp_path / "h.idx"
    hdr.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError, match="offset 2"):
        load_idx_images(hdr, hdr)


def test_idx_round_trip(tmp_path, idx_pair):
    ds = load_idx_images(*idx_pair)
    out_img, out_lbl = tmp_path / "o_img", tmp_path / "o_lbl"
    write_idx_images(ds, out_img, out_lbl)
    again = load_idx_images(out_img, out_lbl)
    assert np.array_equal(ds.features, again.features) and np.array_equal(ds.labels, again.labels)
    assert out_img.read_bytes() == idx_pair[0].read_bytes()


def test_csv_round_trip(tmp_path):
    ds = synth_blobs(n=30, classes=3, dim=4, seed=2)
    path = tmp_path / "d.csv"
    write_csv(ds, path)
    again = load_csv(path, classes=3, seed=2)
    assert np.array_equal(ds.features, again.features)
    assert np.array_equal(ds.labels, again.labels)


def test_csv_errors(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(DataError, match="label"):
        load_csv(p)
    p.write_text("a,label\n1\n")
    with pytest.raises(DataError, match=":2:"):
        load_csv(p)
    p.write_text("a,label\nfoo,1\n")
    with pytest.raises(DataError):
        load_csv(p)
    p.write_text("")
    with pytest.raises(DataError, match="empty"):
        load_csv(p)


def test_batch_sizes():
    ds = Dataset(np.zeros((10, 1)), np.zeros(10), 1, np.arange(10), np.arange(0))
    assert [len(y) for _, y in batches(ds, "train", 4, 1)] == [4, 4, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 120), st.integers(1, 50), st.integers(0, 100))
def test_batches_cover_split_once(n, batch, epoch):
    feats = np.arange(n, dtype=float)[:, None]
    ds = Dataset(feats, np.zeros(n), 1, np.arange(0, n, 2), np.arange(1, n, 2))
    seen = np.concatenate([x[:, 0] for x, _ in batches(ds, "train", batch, epoch)]).astype(int)
    assert sorted(seen.tolist()) == ds.train_idx.tolist()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 50))
def test_batch_size_does_not_change_order(b1, b2, epoch):
    ds = synth_blobs(n=60, classes=3, dim=2, seed=1)
    first = np.concatenate([y for _, y in batches(ds, "train", b1, epoch)])
    second = np.concatenate([y for _, y in batches(ds, "train", b2, epoch)])
    assert np.array_equal(first, second)


def test_epoch_permutation_deterministic():
    ds = synth_blobs(n=100, seed=3)
    assert np.array_equal(epoch_permutation(ds, "train", 2), epoch_permutation(ds, "train", 2))
    assert not np.array_equal(epoch_permutation(ds, "train", 2), epoch_permutation(ds, "train", 3))


def test_prefetch_preserves_order(monkeypatch):
    monkeypatch.setenv("LDB_THREADS", "2")
    assert list(prefetch(iter(range(50)))) == list(range(50))

    def boom():
        yield 1
        raise RuntimeError("x")

    with pytest.raises(RuntimeError):
        list(prefetch(boom()))


def test_standardize_per_channel():
    feats = np.stack([np.full((2, 2), 3.0), np.full((2, 2), 10.0)])[None].repeat(3, axis=0)
    ds = Dataset(feats, [0, 0, 0], 1, np.arange(3), np.arange(0))
    out = standardize(ds, [1.0, 4.0], [2.0, 3.0])
    assert np.all(out.features[:, 0] == 1.0) and np.all(out.features[:, 1] == 2.0)
    with pytest.raises(DataError):
        standardize(ds, [1.0, 2.0, 3.0], [1.0])
    with pytest.raises(DataError):
        standardize(ds, [0.0], [0.0])


def test_baseline_mlp8_learns_three_class_blobs():
    ds = synth_blobs(n=1000, classes=3, dim=32, noise_sigma=0.5, seed=0)
    net = build_preset("mlp-8", ds.sample_shape, ds.classes, width=64, seed=1)
    report = train_baseline(net, ds, 0.02, 128, 30)
    assert report.final_val_accuracy >= 0.97
