"""Rotation self-supervision: four rotated copies of a batch with augmented labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import rotate90
from .errors import DomainError, ShapeError

N_ROTATIONS = 4


@dataclass(frozen=True)
class AugmentedBatch:
    images: np.ndarray          # (R*N, H, W, C), rotation-major blocks of N rows
    aug_labels: np.ndarray      # (R*N,) in [0, 4m)
    rotation_index: np.ndarray  # (R*N,)
    base_labels: np.ndarray     # (R*N,)

    def __len__(self) -> int:
        return len(self.aug_labels)


def aug_label(rotation: int, local_class: int, num_classes: int) -> int:
    """Rotation-major index of (rotation, class) in a head of width ``4 * num_classes``."""
    return rotation * num_classes + local_class


def augment_rotations(images: np.ndarray, labels, num_classes: int,
                      rotations=range(N_ROTATIONS)) -> AugmentedBatch:
    """Stack the batch rotated by 0, 90, 180 and 270 degrees.

    ``labels`` are class indices local to the current head block. Passing
    ``rotations=(0,)`` keeps only the unrotated copy (used when the
    self-supervised task is switched off).
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if images.ndim != 4:
        raise ShapeError(f"expected an NxHxWxC batch, got shape {images.shape}")
    if images.shape[1] != images.shape[2]:
        raise ShapeError(f"rotation needs square images, got {images.shape[1]}x{images.shape[2]}")
    if len(labels) != len(images):
        raise ShapeError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DomainError(f"labels must lie in [0, {num_classes})")
    rotations = list(rotations)
    n = len(images)
    blocks = [images if k == 0 else rotate90(images, k) for k in rotations]
    rot = np.repeat(np.asarray(rotations, dtype=np.int64), n)
    base = np.tile(labels, len(rotations))
    return AugmentedBatch(
        images=np.concatenate(blocks, axis=0) if blocks else images[:0],
        aug_labels=rot * num_classes + base,
        rotation_index=rot,
        base_labels=base,
    )
