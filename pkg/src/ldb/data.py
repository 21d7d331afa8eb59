"""
Datasets: synthetic Gaussian blobs, IDX image files and CSV tables.

All randomness (cluster centres, noise, train/val split, per-epoch
shuffles) comes from :class:`~ldb.tensor.RngStream` streams keyed by the
dataset seed, so a seed fully determines every batch sequence.
"""

import csv
import os
import queue
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError
from .tensor import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# stream tags under the data seed
_CENTERS, _NOISE, _SPLIT, _SHUFFLE = 10, 11, 12, 13


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    shuffle_seed: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def sample_shape(self):
        return self.features.shape[1:]

    def indices(self, split):
        if split == "train":
            return self.train_idx
        if split == "val":
            return self.val_idx
        if split == "all":
            return np.arange(len(self))
        raise ValueError(f"unknown split {split!r}")

    def split(self, split):
        idx = self.indices(split)
        return self.features[idx], self.labels[idx]


def split_indices(n, seed, val_fraction=0.2):
    """Seeded train/val partition; returns sorted index arrays."""
    perm = RngStream(seed, (_SPLIT,)).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def synth_blobs(n=2000, classes=4, dim=32, noise_sigma=0.5, seed=0, center_scale=3.0):
    """One isotropic Gaussian cluster per class, 80/20 train/val split.

    Centres are drawn from N(0, center_scale**2 / dim) per coordinate, so two
    centres lie about ``center_scale * sqrt(2)`` apart whatever ``dim`` is.
    Labels cycle through the classes.
    """
    if n < classes:
        raise DataError(f"need n >= classes, got n={n}, classes={classes}")
    if noise_sigma < 0:
        raise DataError(f"noise_sigma must be >= 0, got {noise_sigma}")
    centers = center_scale / np.sqrt(dim) * RngStream(seed, (_CENTERS,)).normal((classes, dim))
    labels = np.arange(n) % classes
    features = centers[labels]
    if noise_sigma > 0:
        features = features + noise_sigma * RngStream(seed, (_NOISE,)).normal((n, dim))
    train_idx, val_idx = split_indices(n, seed)
    return Dataset(features, labels, classes, train_idx, val_idx, shuffle_seed=seed)


def _read_idx(path, magic):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated IDX header", len(buf))
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{path}: truncated IDX dimensions", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    size = int(np.prod(dims))
    if len(buf) != header + size:
        off = min(len(buf), header + size)
        raise FormatError(f"{path}: expected {size} data bytes, found {len(buf) - header}", off)
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_idx_images(images_path, labels_path, classes=None, val_fraction=0.2, seed=0):
    """Load an IDX image/label file pair (MNIST layout).

    Pixels are scaled to [0, 1] and given a channel axis: (N, 1, rows, cols).
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    features = images[:, None, :, :].astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 0
    train_idx, val_idx = split_indices(len(labels), seed, val_fraction)
    return Dataset(features, labels, classes, train_idx, val_idx, shuffle_seed=seed)


def write_idx_images(ds, images_path, labels_path):
    """Write ``ds`` (pixel values k/255) as an IDX file pair."""
    feats = ds.features.reshape(len(ds), *ds.features.shape[-2:])
    pixels = np.rint(feats * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise DataError("features must lie in [0, 1] to be written as IDX pixels")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *pixels.shape))
        f.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(ds)))
        f.write(ds.labels.astype(np.uint8).tobytes())


def load_csv(path, classes=None, val_fraction=0.2, seed=0):
    """Load a table with a header row; the ``label`` column holds class ids."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty CSV file") from None
        if "label" not in header:
            raise DataError(f"{path}: no 'label' column in header {header}")
        li = header.index("label")
        rows = list(reader)
    feats, labels = [], []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            labels.append(int(row[li]))
            feats.append([float(v) for j, v in enumerate(row) if j != li])
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from None
    features = np.array(feats, dtype=np.float64).reshape(len(rows), len(header) - 1)
    labels = np.array(labels, dtype=np.int64)
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 0
    train_idx, val_idx = split_indices(len(labels), seed, val_fraction)
    return Dataset(features, labels, classes, train_idx, val_idx, shuffle_seed=seed)


def write_csv(ds, path):
    flat = ds.features.reshape(len(ds), -1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{j}" for j in range(flat.shape[1])] + ["label"])
        for row, y in zip(flat, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def standardize(ds, mean, std):
    """Return a copy of ``ds`` with ``(x - mean[c]) / std[c]`` per channel.

    Channels are axis 1 of the features; flat features count as one channel
    per column. ``mean`` and ``std`` take one value per channel, or a single
    value for all of them.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    std = np.atleast_1d(np.asarray(std, dtype=np.float64))
    channels = ds.features.shape[1] if ds.features.ndim > 1 else 1
    for name, v in (("mean", mean), ("std", std)):
        if v.size not in (1, channels):
            raise DataError(f"{name} needs 1 or {channels} values, got {v.size}")
    if np.any(std <= 0):
        raise DataError("std values must be > 0")
    shape = (1, -1) + (1,) * (ds.features.ndim - 2)
    features = (ds.features - mean.reshape(shape)) / std.reshape(shape)
    return Dataset(features, ds.labels.copy(), ds.classes, ds.train_idx, ds.val_idx, ds.shuffle_seed)


def epoch_permutation(ds, split, epoch):
    """Order in which ``split`` is visited in ``epoch``; independent of batch size."""
    idx = ds.indices(split)
    return idx[RngStream(ds.shuffle_seed, (_SHUFFLE, epoch)).permutation(len(idx))]


def batches(ds, split, batch_size, epoch):
    """Yield ``(features, labels)`` chunks of a seeded permutation of ``split``.

    The final short batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_permutation(ds, split, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield ds.features[idx], ds.labels[idx]


def prefetch_threads():
    """Background threads allowed for batch prefetching (``LDB_THREADS``, default 1)."""
    try:
        return max(1, int(os.environ.get("LDB_THREADS", "1")))
    except ValueError:
        return 1


def prefetch(iterable, depth=2):
    """Iterate ``iterable`` from a background thread, preserving order.

    Runs inline when ``LDB_THREADS`` allows only one thread.
    """
    if prefetch_threads() < 2:
        yield from iterable
        return
    q = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        try:
            for item in iterable:
                q.put(item)
        except BaseException as e:  # re-raised on the consumer side
            q.put(e)
        q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item
