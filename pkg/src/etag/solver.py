"""Staged convolutional feature extractor, per-stage auxiliary heads and the final classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .augmentation import N_ROTATIONS
from .errors import DomainError, ShapeError
from .layers import ConvBlock, Linear, Module
from .serialize import load_params, save_params


@dataclass
class StageConfig:
    widths: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    in_channels: int = 1
    input_size: int = 32
    stride: int = 2

    def __post_init__(self):
        if len(self.widths) < 2:
            raise DomainError(f"need at least 2 stages, got {len(self.widths)}")
        if min(self.widths) <= 0:
            raise DomainError("stage widths must be positive")

    @property
    def n_stages(self) -> int:
        return len(self.widths)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def stage_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample shape of each stage output; the last one is the pooled feature."""
        shapes, size = [], self.input_size
        for w in self.widths[:-1]:
            size = (size - 1) // self.stride + 1
            shapes.append((size, size, w))
        shapes.append((self.feature_dim,))
        return shapes


class StagedExtractor(Module):
    _children = ("blocks",)

    def __init__(self, config: StageConfig, rng, init: str = "he"):
        self.config = config
        chans = [config.in_channels] + list(config.widths)
        self.blocks = [ConvBlock(a, b, config.stride, rng, init) for a, b in zip(chans[:-1], chans[1:])]

    def forward_all(self, x) -> list[Tensor]:
        """Return ``[f^1, ..., f^L]``; the last entry is globally pooled to (N, d)."""
        x = ad.as_tensor(x)
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (c.input_size, c.input_size, c.in_channels):
            raise ShapeError(f"expected (N, {c.input_size}, {c.input_size}, {c.in_channels}), "
                             f"got {x.shape}")
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        outs[-1] = ad.global_avg_pool(outs[-1])
        return outs

    def features(self, x) -> Tensor:
        return self.forward_all(x)[-1]


class AuxClassifier(Module):
    """Head for stage ``l``: copies of the remaining conv stages, pooling, then a linear layer."""

    _children = ("blocks", "fc")

    def __init__(self, stage: int, config: StageConfig, n_classes: int, rng, init: str = "he"):
        if not 1 <= stage < config.n_stages:
            raise DomainError(f"aux stage must be in [1, {config.n_stages - 1}], got {stage}")
        self.stage = stage
        widths = config.widths
        chans = widths[stage - 1:]
        self.blocks = [ConvBlock(a, b, config.stride, rng, init) for a, b in zip(chans[:-1], chans[1:])]
        self.fc = Linear(widths[-1], N_ROTATIONS * n_classes, rng, init)

    @property
    def width(self) -> int:
        return self.fc.n_out

    def __call__(self, f: Tensor) -> Tensor:
        x = f
        for block in self.blocks:
            x = block(x)
        return self.fc(ad.global_avg_pool(x))

    def expand(self, n_new: int, rng, init: str = "he") -> None:
        if n_new <= 0:
            raise DomainError("new class count must be positive")
        self.fc.add_outputs(N_ROTATIONS * n_new, rng, init)


class FinalClassifier(Module):
    """Bias-free linear layer ``w`` of shape (classes_seen, d); predictions are softmax(w f)."""

    _children = ("weight",)

    def __init__(self, feature_dim: int, n_classes: int, rng, init: str = "he"):
        self._linear = Linear(feature_dim, n_classes, rng, init, bias=False)

    @property
    def weight(self) -> Tensor:
        return self._linear.weight

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def logits(self, f, rows: slice | None = None) -> Tensor:
        f = ad.as_tensor(f)
        if f.ndim != 2 or f.shape[1] != self.weight.shape[1]:
            raise ShapeError(f"features of shape {f.shape} do not match d={self.weight.shape[1]}")
        w = self.weight if rows is None else self.weight[rows]
        return ad.matmul(f, ad.transpose(w))

    def expand(self, n_new: int, rng, init: str = "he") -> None:
        if n_new <= 0:
            raise DomainError("new class count must be positive")
        self._linear.add_outputs(n_new, rng, init)


def predict(classifier: FinalClassifier, f) -> np.ndarray:
    """Class probabilities softmax(w f) over every class seen so far."""
    f = Tensor(np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64))
    return ad.softmax_with_temperature(classifier.logits(f)).data


def predict_labels(classifier: FinalClassifier, f) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(predict(classifier, f), axis=1)


class Solver(Module):
    """Extractor F, auxiliary heads C^1..C^{L-1} and final classifier C."""

    _children = ("extractor", "aux", "classifier")

    def __init__(self, config: StageConfig, n_classes: int, rng, init: str = "he"):
        self.config = config
        self.extractor = StagedExtractor(config, rng, init)
        self.aux = [AuxClassifier(l, config, n_classes, rng, init) for l in range(1, config.n_stages)]
        self.classifier = FinalClassifier(config.feature_dim, n_classes, rng, init)

    @property
    def n_classes(self) -> int:
        return self.classifier.n_classes

    def forward_all(self, x) -> list[Tensor]:
        return self.extractor.forward_all(x)

    def aux_logits(self, stage: int, f: Tensor) -> Tensor:
        """Raw logits of the stage-``stage`` head (1-based); width is 4 * classes seen."""
        if not 1 <= stage <= len(self.aux):
            raise DomainError(f"stage index {stage} outside [1, {len(self.aux)}]")
        expected = self.config.stage_shapes()[stage - 1]
        if f.shape[1:] != expected:
            raise ShapeError(f"stage {stage} output should be (N, {expected}), got {f.shape}")
        return self.aux[stage - 1](f)

    def expand(self, n_new: int, rng, init: str = "he") -> None:
        self.classifier.expand(n_new, rng, init)
        for head in self.aux:
            head.expand(n_new, rng, init)

    def snapshot(self) -> "Solver":
        return self.frozen_copy()

    def predict(self, x) -> np.ndarray:
        return predict(self.classifier, self.extractor.features(x))

    def save(self, path) -> None:
        meta = {"stage_config": asdict(self.config), "n_classes": self.n_classes}
        save_params(path, self.state_arrays(), "solver", meta)

    @classmethod
    def load(cls, path) -> "Solver":
        kind, meta, arrays = load_params(path)
        if kind != "solver":
            raise DomainError(f"{path} holds a {kind!r}, not a solver")
        solver = cls(StageConfig(**meta["stage_config"]), meta["n_classes"], None, init="zeros")
        solver.load_arrays(arrays)
        return solver
