"""Task streams: dataset ingestion, disjoint class splits, and single-pass
mini-batch emission.

Datasets arrive either as IDX files (the classic ubyte layout, optionally
gzip-compressed) or from the synthetic Gaussian-blob generator used for fast
tests. A stream owns the data: training methods only ever see the current
batch, except the explicitly flagged whole-task access used by the
prediction-precomputing baselines.
"""

from __future__ import annotations

import gzip
import struct

import numpy as np

from .errors import ConfigError, IdxFormatError
from .model import Batch, one_hot

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _open_maybe_gzip(path, mode):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _read_exact(f, n, path):
    data = f.read(n)
    if len(data) != n:
        raise IdxFormatError(f"{path}: truncated payload (wanted {n} bytes, got {len(data)})")
    return data


def load_idx(images_path, labels_path):
    """Parse an IDX image/label file pair.

    Returns (images, labels): images as [N, H, W] float64 scaled to [0, 1],
    labels as [N] integers. Big-endian magic numbers are checked strictly.
    """
    with _open_maybe_gzip(images_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"{images_path}: bad magic 0x{magic:08x}, expected an IDX image file")
        n, h, w = struct.unpack(">III", _read_exact(f, 12, images_path))
        payload = _read_exact(f, n * h * w, images_path)
        if f.read(1):
            raise IdxFormatError(f"{images_path}: trailing bytes after payload")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w).astype(np.float64) / 255.0

    with _open_maybe_gzip(labels_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(f"{labels_path}: bad magic 0x{magic:08x}, expected an IDX label file")
        (count,) = struct.unpack(">I", _read_exact(f, 4, labels_path))
        payload = _read_exact(f, count, labels_path)
        if f.read(1):
            raise IdxFormatError(f"{labels_path}: trailing bytes after payload")
    labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)

    if count != n:
        raise IdxFormatError(f"image count {n} does not match label count {count}")
    return images, labels


def write_idx(images_u8, labels, images_path, labels_path):
    """Write uint8 [N, H, W] images and labels in the IDX layout (fixtures)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images_u8.shape
    with _open_maybe_gzip(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images_u8.tobytes())
    with _open_maybe_gzip(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


class Dataset:
    """Flat images plus labels and the 2-D geometry augmentation needs."""

    __slots__ = ("images", "labels", "image_shape")

    def __init__(self, images, labels, image_shape):
        self.images = np.asarray(images)
        self.labels = np.asarray(labels)
        self.image_shape = (int(image_shape[0]), int(image_shape[1]))
        if self.images.ndim != 2 or self.images.shape[1] != self.image_shape[0] * self.image_shape[1]:
            raise ConfigError("dataset images must be [N, H*W]")
        if len(self.labels) != len(self.images):
            raise ConfigError("dataset images/labels length mismatch")

    @classmethod
    def from_stacked(cls, images_nhw, labels):
        n, h, w = images_nhw.shape
        return cls(images_nhw.reshape(n, h * w), labels, (h, w))

    def __len__(self):
        return len(self.images)


class TaskSpec:
    """One task: disjoint class subset plus its sample indices."""

    __slots__ = ("task_index", "class_ids", "sample_indices")

    def __init__(self, task_index, class_ids, sample_indices):
        self.task_index = int(task_index)
        self.class_ids = tuple(int(c) for c in class_ids)
        self.sample_indices = np.asarray(sample_indices)


def make_splits(labels, n_tasks, seed):
    """Randomly partition the label space into n_tasks disjoint class sets.

    The same seed always yields the same splits, so every method can be run
    on identical task sequences.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if n_tasks < 1 or len(classes) % n_tasks != 0:
        raise ConfigError(f"{n_tasks} tasks do not evenly divide {len(classes)} classes")
    perm = np.random.default_rng(seed).permutation(classes)
    per = len(classes) // n_tasks
    splits = []
    for i in range(n_tasks):
        cls = tuple(sorted(int(c) for c in perm[i * per : (i + 1) * per]))
        idx = np.flatnonzero(np.isin(labels, cls))
        splits.append(TaskSpec(i + 1, cls, idx))
    return splits


def synthetic_tasks(n_tasks, classes_per_task, samples_per_class, dim, separation, seed):
    """Isotropic Gaussian blobs, one mean per class, pairwise mean distance
    exactly `separation`; 20% of each class is held out as the test split.

    Returns (train_dataset, test_dataset, splits). Class c's mean sits on
    axis c, which needs dim >= n_tasks * classes_per_task.
    """
    if samples_per_class <= 0:
        raise ConfigError("samples_per_class must be positive (empty task)")
    if separation <= 0:
        raise ConfigError("separation must be positive")
    total_classes = n_tasks * classes_per_task
    if dim < total_classes:
        raise ConfigError(f"dim must be at least {total_classes} for {total_classes} classes")
    rng = np.random.default_rng(seed)
    scale = separation / np.sqrt(2.0)
    tr_x, tr_y, te_x, te_y = [], [], [], []
    n_test = max(1, samples_per_class // 5)
    for c in range(total_classes):
        mean = np.zeros(dim)
        mean[c] = scale
        pts = mean + rng.standard_normal((samples_per_class, dim))
        te_x.append(pts[:n_test])
        te_y.append(np.full(n_test, c))
        tr_x.append(pts[n_test:])
        tr_y.append(np.full(samples_per_class - n_test, c))
    train = Dataset(np.concatenate(tr_x), np.concatenate(tr_y), (1, dim))
    test = Dataset(np.concatenate(te_x), np.concatenate(te_y), (1, dim))
    splits = []
    for t in range(n_tasks):
        cls = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
        idx = np.flatnonzero(np.isin(train.labels, cls))
        splits.append(TaskSpec(t + 1, cls, idx))
    return train, test, splits


class TaskData:
    """Whole-task data handed out only on explicit, flagged request."""

    __slots__ = ("task_index", "class_labels", "images", "labels")

    def __init__(self, task_index, class_labels, images, labels):
        self.task_index = task_index
        self.class_labels = class_labels
        self.images = images
        self.labels = labels  # one-hot over class_labels

    def __len__(self):
        return len(self.images)


class TaskRun:
    """Single-pass batch iterator over one task's training data."""

    def __init__(self, dataset, spec, order, batch_size, dtype):
        self.task_index = spec.task_index
        self.class_labels = spec.class_ids
        self._dataset = dataset
        self._order = order
        self._batch_size = batch_size
        self._dtype = dtype
        self._consumed = False
        self.full_access_requested = False

    @property
    def num_classes(self):
        return len(self.class_labels)

    @property
    def num_samples(self):
        return len(self._order)

    def batches(self):
        """Emit each training sample exactly once; the final partial batch is
        kept rather than dropped (online learning cannot discard data)."""
        if self._consumed:
            raise ConfigError(f"task {self.task_index} stream already consumed (single pass)")
        self._consumed = True
        for start in range(0, len(self._order), self._batch_size):
            idx = self._order[start : start + self._batch_size]
            images = self._dataset.images[idx].astype(self._dtype)
            labels = one_hot(self._dataset.labels[idx], self.class_labels, dtype=self._dtype)
            yield Batch(images, labels, self.task_index)

    def request_full_task_access(self):
        """Whole-task data for methods that precompute predictions; the
        request is recorded so reports can flag the constraint violation."""
        self.full_access_requested = True
        images = self._dataset.images[self._order].astype(self._dtype)
        labels = one_hot(self._dataset.labels[self._order], self.class_labels, dtype=self._dtype)
        return TaskData(self.task_index, self.class_labels, images, labels)


class TaskStream:
    """Ordered tasks, each emitting shuffled batches without replacement."""

    def __init__(self, dataset, splits, batch_size, seed, limit_per_task=None, dtype=np.float64):
        if batch_size < 1:
            raise ConfigError("batch_size must be positive")
        self.dataset = dataset
        self.splits = list(splits)
        self.batch_size = int(batch_size)
        self.limit_per_task = limit_per_task
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(seed)

    def tasks(self):
        for spec in self.splits:
            order = self._rng.permutation(spec.sample_indices)
            if self.limit_per_task:
                order = order[: self.limit_per_task]
            yield TaskRun(self.dataset, spec, order, self.batch_size, self.dtype)
