"""Datasets, class-incremental task streams, synthetic clusters and IDX archives."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray  # (N, H, W, C) float64 in [0, 1] or raw features
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def classes(self) -> np.ndarray:
        return np.unique(np.concatenate([self.y_train, self.y_test]))

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.x_train.shape[1:]


@dataclass(frozen=True)
class TaskSpec:
    classes: np.ndarray          # global (contiguous) class ids of this task
    source_classes: np.ndarray   # class ids in the original dataset
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def m(self) -> int:
        return len(self.classes)

    @property
    def n(self) -> int:
        return len(self.y_train)


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[TaskSpec, ...]

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, t: int) -> TaskSpec:
        return self.tasks[t]

    @property
    def task_sizes(self) -> list[int]:
        return [task.m for task in self.tasks]

    @property
    def n_classes(self) -> int:
        return int(sum(self.task_sizes))

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.tasks[0].x_train.shape[1:]

    def cumulative(self, t: int, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        xs = [getattr(task, f"x_{split}") for task in self.tasks[: t + 1]]
        ys = [getattr(task, f"y_{split}") for task in self.tasks[: t + 1]]
        return np.concatenate(xs), np.concatenate(ys)


def split_classes(n_classes: int, n_tasks: int, first_fraction: float | None = None) -> list[int]:
    """Class counts per task.

    With ``first_fraction`` the first task takes ``ceil(fraction * n_classes)``
    classes and the rest are spread over ``n_tasks - 1`` increments, extra
    classes going to the earliest increments. Without it, all tasks share the
    classes as evenly as possible the same way.
    """
    if n_tasks < 1:
        raise DomainError(f"need at least one task, got {n_tasks}")
    if first_fraction is None:
        first, rest, n_inc = 0, n_classes, n_tasks
    else:
        if not 0 < first_fraction <= 1:
            raise DomainError(f"first_fraction must be in (0, 1], got {first_fraction}")
        first = math.ceil(first_fraction * n_classes - 1e-9)
        rest, n_inc = n_classes - first, n_tasks - 1
    if n_inc > rest or (n_inc == 0 and rest > 0):
        raise DomainError(f"cannot split {rest} remaining classes into {n_inc} non-empty increments")
    base, extra = divmod(rest, n_inc) if n_inc else (0, 0)
    sizes = [base + (1 if i < extra else 0) for i in range(n_inc)]
    return ([first] if first_fraction is not None else []) + sizes


def build_task_stream(dataset: Dataset, n_tasks: int, first_fraction: float | None = None,
                      seed: int = 0) -> TaskStream:
    """Assign a seeded permutation of classes to tasks and relabel them 0..C-1 in arrival order."""
    classes = dataset.classes
    sizes = split_classes(len(classes), n_tasks, first_fraction)
    order = classes[np.random.default_rng([seed, 0xC1A55]).permutation(len(classes))]
    relabel = {int(c): i for i, c in enumerate(order)}
    lut = np.vectorize(relabel.__getitem__, otypes=[np.int64])
    tasks, start = [], 0
    for m in sizes:
        src = order[start:start + m]
        tr = np.isin(dataset.y_train, src)
        te = np.isin(dataset.y_test, src)
        tasks.append(TaskSpec(
            classes=np.arange(start, start + m),
            source_classes=src,
            x_train=dataset.x_train[tr],
            y_train=lut(dataset.y_train[tr]) if tr.any() else np.zeros(0, np.int64),
            x_test=dataset.x_test[te],
            y_test=lut(dataset.y_test[te]) if te.any() else np.zeros(0, np.int64),
        ))
        start += m
    return TaskStream(tuple(tasks))


def synth_gaussian_dataset(n_classes: int, dim: int, separation: float, samples_per_class: int,
                           seed: int = 0, test_fraction: float = 0.2) -> Dataset:
    """Unit-covariance Gaussian clusters with means on a sphere of radius ``separation``.

    Samples are laid out as s x s x 1 images (s^2 = dim) so the conv pipeline
    applies unchanged. Each class is split 80/20 into train/test.
    """
    side = math.isqrt(dim)
    if side * side != dim:
        raise DomainError(f"dim must be a perfect square, got {dim}")
    if separation < 0:
        raise DomainError(f"separation must be non-negative, got {separation}")
    rng = np.random.default_rng([seed, 0x5EED])
    dirs = rng.standard_normal((n_classes, dim))
    means = separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    n_test = int(round(test_fraction * samples_per_class))
    xtr, ytr, xte, yte = [], [], [], []
    for c in range(n_classes):
        x = means[c] + rng.standard_normal((samples_per_class, dim))
        xte.append(x[:n_test])
        xtr.append(x[n_test:])
        yte.append(np.full(n_test, c))
        ytr.append(np.full(samples_per_class - n_test, c))
    shape = (-1, side, side, 1)
    return Dataset(np.concatenate(xtr).reshape(shape), np.concatenate(ytr).astype(np.int64),
                   np.concatenate(xte).reshape(shape), np.concatenate(yte).astype(np.int64))


def synth_gaussian_stream(n_classes: int, dim: int, separation: float, samples_per_class: int,
                          seed: int = 0, n_tasks: int = 4, first_fraction: float | None = None) -> TaskStream:
    ds = synth_gaussian_dataset(n_classes, dim, separation, samples_per_class, seed)
    return build_task_stream(ds, n_tasks, first_fraction, seed)


# --------------------------------------------------------------------------
# IDX


def _read_header(raw: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(raw) >= 4:
        (got,) = struct.unpack_from(">I", raw, 0)
        if got != magic:
            raise FormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    if len(raw) < need:
        raise FormatError(f"{path}: header needs {need} bytes, file has {len(raw)}", len(raw))
    return struct.unpack_from(f">{ndim}I", raw, 4)


def read_idx_images(path) -> np.ndarray:
    """(N, rows, cols, 1) float64 pixels scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    n, rows, cols = _read_header(raw, IDX_IMAGES_MAGIC, 3, path)
    expected = n * rows * cols
    payload = raw[16:]
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} pixel bytes, found {len(payload)}",
                          16 + min(len(payload), expected))
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols, 1) / 255.0


def read_idx_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (n,) = _read_header(raw, IDX_LABELS_MAGIC, 1, path)
    payload = raw[8:]
    if len(payload) != n:
        raise FormatError(f"{path}: expected {n} label bytes, found {len(payload)}",
                          8 + min(len(payload), n))
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images, labels = read_idx_images(images_path), read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", 4)
    return images, labels


def load_idx_dataset(train_images, train_labels, test_images, test_labels) -> Dataset:
    xtr, ytr = load_idx(train_images, train_labels)
    xte, yte = load_idx(test_images, test_labels)
    return Dataset(xtr, ytr, xte, yte)


def write_idx_images(path, images) -> None:
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[..., 0]
    n, rows, cols = images.shape
    if images.dtype != np.uint8:
        images = np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Path(path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())
