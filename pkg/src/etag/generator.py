"""Conditional VAE over final features with task-oriented training and knowledge reconstruction."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, ShapeError, UsageError
from .layers import MLP, Module
from .losses import LambdaSchedule, cross_entropy
from .serialize import load_params, save_params


@dataclass
class GeneratorConfig:
    feature_dim: int = 64
    n_classes: int = 10       # one-hot width; the total number of classes in the stream
    latent_dim: int = 32
    hidden: int = 128


class Generator(Module):
    """Encoder maps [f ; onehot(y)] to (mu, log sigma^2); decoder maps [z ; onehot(y)] to f-hat."""

    _children = ("encoder", "decoder")

    def __init__(self, config: GeneratorConfig, rng, init: str = "he"):
        self.config = config
        c = config
        self.encoder = MLP([c.feature_dim + c.n_classes, c.hidden, c.hidden, 2 * c.latent_dim], rng, init)
        self.decoder = MLP([c.latent_dim + c.n_classes, c.hidden, c.hidden, c.feature_dim], rng, init)
        self.n_seen = 0

    def _condition(self, y) -> Tensor:
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if y.size and (y.min() < 0 or y.max() >= max(self.n_seen, 0) or y.max() >= self.config.n_classes):
            raise DomainError(f"class ids must be among the {self.n_seen} classes seen so far")
        return ad.one_hot(y, self.config.n_classes)

    def encode(self, f, y) -> tuple[Tensor, Tensor]:
        f = ad.as_tensor(f)
        if f.ndim != 2 or f.shape[1] != self.config.feature_dim:
            raise ShapeError(f"features {f.shape} do not match d={self.config.feature_dim}")
        h = self.encoder(ad.concat([f, self._condition(y)], axis=1))
        k = self.config.latent_dim
        return h[:, :k], h[:, k:]

    def decode(self, y, z) -> Tensor:
        z = ad.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"latent codes {z.shape} do not match k={self.config.latent_dim}")
        if not np.all(np.isfinite(z.data)):
            raise DomainError("latent codes must be finite")
        return self.decoder(ad.concat([z, self._condition(y)], axis=1))

    def snapshot(self) -> "Generator":
        return self.frozen_copy()

    def save(self, path) -> None:
        meta = {"config": asdict(self.config), "n_seen": self.n_seen}
        save_params(path, self.state_arrays(), "generator", meta)

    @classmethod
    def load(cls, path) -> "Generator":
        kind, meta, arrays = load_params(path)
        if kind != "generator":
            raise DomainError(f"{path} holds a {kind!r}, not a generator")
        gen = cls(GeneratorConfig(**meta["config"]), None, init="zeros")
        gen.load_arrays(arrays)
        gen.n_seen = meta["n_seen"]
        return gen


def reparameterize(mu: Tensor, logvar: Tensor, eps) -> Tensor:
    return ad.gaussian_sample(mu, logvar, eps)


def prior_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over latent dims, averaged over the batch."""
    mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar)
    if mu.ndim == 1:
        mu, logvar = mu.reshape(1, -1), logvar.reshape(1, -1)
    # expm1(lv) - lv stays >= 0 in floating point; exp(lv) - lv - 1 can round below zero
    per_dim = mu * mu + (ad.expm1(logvar) - logvar)
    return ad.mean(ad.sum(per_dim, axis=1)) * 0.5


def gaussian_nll(target, pred: Tensor) -> Tensor:
    """Unit-variance Gaussian negative log-likelihood up to a constant: mean of 0.5 ||target - pred||^2."""
    target = Tensor(np.asarray(target.data if isinstance(target, Tensor) else target))
    if target.shape != pred.shape:
        raise ShapeError(f"target {target.shape} and prediction {pred.shape} differ")
    return ad.mean(ad.squared_l2(pred - target)) * 0.5


def vae_loss_new(gen: Generator, f, y, classifier=None, rng=None, eps=None, z_prior=None,
                 task_oriented: bool = True, parts: dict | None = None) -> Tensor:
    """Prior KL + reconstruction of the current task's features (+ frozen-classifier CE).

    The classifier term decodes fresh prior draws ``z_prior`` for the same labels
    and asks the frozen final classifier to recognise them. ``eps`` and ``z_prior``
    may be pinned; otherwise they are drawn from ``rng``.
    """
    f = np.asarray(f.data if isinstance(f, Tensor) else f)
    y = np.asarray(y, dtype=np.int64)
    k = gen.config.latent_dim
    if eps is None:
        eps = rng.standard_normal((len(y), k))
    mu, logvar = gen.encode(f, y)
    z = reparameterize(mu, logvar, eps)
    kl = prior_kl(mu, logvar)
    rec = gaussian_nll(f, gen.decode(y, z))
    loss = kl + rec
    if parts is not None:
        parts.update(prior_kl=kl.item(), reconstruction=rec.item())
    if task_oriented:
        if classifier is None or not classifier.frozen:
            raise UsageError("task-oriented generation needs the frozen final classifier")
        if z_prior is None:
            z_prior = rng.standard_normal((len(y), k))
        ce = cross_entropy(classifier.logits(gen.decode(y, z_prior)), y)
        loss = loss + ce
        if parts is not None:
            parts["task_ce"] = ce.item()
    return loss


def vae_loss_old(gen: Generator, old_gen: Generator, n_learned: int, batch_size: int = 64,
                 rng=None, y=None, z=None) -> Tensor:
    """Match the frozen previous decoder on shared (label, noise) inputs over learned classes."""
    if n_learned <= 0:
        raise UsageError("knowledge reconstruction needs at least one learned class")
    if not old_gen.frozen:
        raise UsageError("the previous generator must be a frozen snapshot")
    if y is None:
        y = rng.integers(0, n_learned, size=batch_size)
    if z is None:
        z = rng.standard_normal((len(y), gen.config.latent_dim))
    target = old_gen.decode(y, z).data
    return gaussian_nll(target, gen.decode(y, z))


def generator_loss(new_term: Tensor, old_term: Tensor | None, schedule: LambdaSchedule, t: int) -> Tensor:
    if t == 0 or old_term is None:
        return new_term
    return new_term + old_term * schedule.value


def sample_features(gen: Generator, classes, count_per_class: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Decode ``count_per_class`` fresh prior draws per class; returns constant arrays."""
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    labels = np.repeat(classes, count_per_class)
    if labels.size == 0:
        return np.zeros((0, gen.config.feature_dim)), labels
    z = rng.standard_normal((labels.size, gen.config.latent_dim))
    return gen.decode(labels, z).data.copy(), labels
