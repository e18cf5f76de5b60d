"""Finite-difference gradient suite over every primitive and every composed loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .generator import Generator, GeneratorConfig, generator_loss, vae_loss_new, vae_loss_old
from .losses import (LambdaSchedule, ObjectiveTerms, ce_final, ce_inter, ce_new, kl_inter, l2_final,
                     solver_objective)
from .augmentation import augment_rotations
from .solver import Solver, StageConfig

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    points: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < TOLERANCE)


def _primitive(fn, *shapes, positive=False):
    """Build a check: random inputs of ``shapes`` fed to ``fn`` and projected to a scalar."""
    def make(rng):
        if positive:
            points = [Tensor(rng.uniform(0.2, 2.0, size=s)) for s in shapes]
        else:
            points = [Tensor(rng.standard_normal(s)) for s in shapes]
        proj_rng = np.random.default_rng(rng.integers(1 << 31))
        proj = {}

        def closure(*args):
            out = fn(*args)
            if "w" not in proj:
                proj["w"] = Tensor(proj_rng.standard_normal(out.shape))
            return ad.sum(out * proj["w"])
        return closure, points
    return make


def _eps_fixed(shape):
    def fn(mu, logvar):
        return ad.gaussian_sample(mu, logvar, np.linspace(-1.5, 1.5, int(np.prod(shape))).reshape(shape))
    return fn


_ONE_HOT = ad.one_hot([2, 0, 1], 4)

PRIMITIVES: dict[str, Callable] = {
    "matmul": _primitive(ad.matmul, (3, 4), (4, 2)),
    "transpose": _primitive(ad.transpose, (3, 4)),
    "add": _primitive(ad.add, (3, 4), (3, 4)),
    "sub": _primitive(ad.sub, (3, 4), (3, 4)),
    "mul": _primitive(ad.mul, (3, 4), (3, 4)),
    "scalar_arith": _primitive(lambda a: (a * 2.5 + 1.0) / 3.0 - 0.5, (3, 4)),
    "bias_add": _primitive(ad.bias_add, (2, 3, 4), (4,)),
    "relu": _primitive(ad.relu, (4, 5)),
    "conv2d_stride1": _primitive(lambda x, w, b: ad.conv2d(x, w, b, 1), (2, 5, 5, 2), (3, 3, 2, 3), (3,)),
    "conv2d_stride2": _primitive(lambda x, w, b: ad.conv2d(x, w, b, 2), (2, 5, 5, 2), (3, 3, 2, 3), (3,)),
    "global_avg_pool": _primitive(ad.global_avg_pool, (2, 3, 3, 4)),
    "log": _primitive(ad.log, (3, 4), positive=True),
    "exp": _primitive(ad.exp, (3, 4)),
    "expm1": _primitive(ad.expm1, (3, 4)),
    "sum": _primitive(lambda a: ad.sum(a, axis=1), (3, 4)),
    "mean": _primitive(lambda a: ad.mean(a, axis=0), (3, 4)),
    "squared_l2": _primitive(ad.squared_l2, (3, 4)),
    "l2_norm": _primitive(ad.l2_norm, (3, 4)),
    "concat": _primitive(lambda a, b: ad.concat([a, b], axis=1), (3, 2), (3, 4)),
    "slice": _primitive(lambda a: a[1:, ::2], (3, 4)),
    "reshape": _primitive(lambda a: ad.reshape(a, (4, 3)), (3, 4)),
    "one_hot": _primitive(lambda a: a * _ONE_HOT, (3, 4)),
    "softmax_with_temperature": _primitive(lambda a: ad.softmax_with_temperature(a, 2.0), (3, 4)),
    "log_softmax": _primitive(lambda a: ad.log_softmax(a, 0.7), (3, 4)),
    "kl_divergence": _primitive(ad.kl_divergence, (3, 4), (3, 4), positive=True),
    "gaussian_sample": _primitive(_eps_fixed((3, 4)), (3, 4), (3, 4)),
    "rotate90": _primitive(lambda a: ad.rotate90(a, 1), (2, 3, 3, 2)),
}


# --------------------------------------------------------------------------
# composed losses on toy models

_TOY = StageConfig(widths=[2, 3], in_channels=1, input_size=4)
_SIZES = [2, 2]


def _jitter(module, rng, scale=0.3):
    # zero-initialised biases can park a ReLU exactly on its kink; move off it
    for p in module.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)


def _toy_solver(rng, n_classes=2):
    solver = Solver(_TOY, n_classes, rng)
    _jitter(solver, rng)
    return solver


def _toy_incremental(rng):
    solver = Solver(_TOY, _SIZES[0], rng)
    snapshot = solver.snapshot()
    solver.expand(_SIZES[1], rng)
    _jitter(solver, rng)
    x = rng.standard_normal((3, 4, 4, 1))
    y = np.array([2, 3, 2])
    return solver, snapshot, x, y


def _solver_check(build):
    def make(rng):
        closure, params = build(rng)
        return (lambda *_: closure()), params
    return make


@_solver_check
def _ce_final(rng):
    solver = _toy_solver(rng)
    x, y = rng.standard_normal((3, 4, 4, 1)), np.array([0, 1, 1])
    return (lambda: ce_final(solver.classifier.logits(solver.extractor.features(x)), y)), solver.parameters()


@_solver_check
def _ce_inter(rng):
    solver = _toy_solver(rng)
    batch = augment_rotations(rng.standard_normal((2, 4, 4, 1)), [0, 1], 2)

    def closure():
        outs = solver.forward_all(batch.images)
        return ce_inter([solver.aux_logits(1, outs[0])], batch.aug_labels)
    return closure, solver.parameters()


@_solver_check
def _l2_final(rng):
    solver, snapshot, x, _ = _toy_incremental(rng)
    f_old = snapshot.extractor.features(x).data
    return (lambda: l2_final(solver.extractor.features(x), f_old)), solver.parameters()


@_solver_check
def _kl_inter(rng):
    solver, snapshot, x, _ = _toy_incremental(rng)
    batch = augment_rotations(x, np.zeros(len(x), dtype=int), 1)
    old = [snapshot.aux_logits(1, snapshot.forward_all(batch.images)[0]).data]

    def closure():
        return kl_inter([solver.aux_logits(1, solver.forward_all(batch.images)[0])], old, 3.0)
    return closure, solver.parameters()


@_solver_check
def _ce_new(rng):
    solver, _, x, y = _toy_incremental(rng)
    fhat = rng.standard_normal((4, _TOY.feature_dim))
    yhat = np.array([0, 1, 1, 0])

    def closure():
        cur = solver.classifier.logits(solver.extractor.features(x))
        old = solver.classifier.logits(fhat, rows=slice(0, 2))
        return ce_new(cur, y, old, yhat, 2, LambdaSchedule.at_task(_SIZES, 1).value)
    return closure, solver.parameters()


@_solver_check
def _solver_initial(rng):
    solver = _toy_solver(rng)
    x, y = rng.standard_normal((2, 4, 4, 1)), np.array([1, 0])
    return (lambda: solver_objective(solver, x, y, _SIZES, 0, ObjectiveTerms())[0]), solver.parameters()


@_solver_check
def _solver_incremental(rng):
    solver, snapshot, x, y = _toy_incremental(rng)
    replay = (rng.standard_normal((3, _TOY.feature_dim)), np.array([0, 1, 0]))

    def closure():
        return solver_objective(solver, x, y, _SIZES, 1, ObjectiveTerms(), snapshot=snapshot,
                                replay=replay)[0]
    return closure, solver.parameters()


_GEN = GeneratorConfig(feature_dim=3, n_classes=4, latent_dim=2, hidden=5)


def _toy_generator(rng, n_seen):
    gen = Generator(_GEN, rng)
    gen.n_seen = n_seen
    _jitter(gen, rng)
    return gen


@_solver_check
def _vae_new(rng):
    gen = _toy_generator(rng, 2)
    classifier = Solver(_TOY, 2, rng).classifier.frozen_copy()
    f, y = rng.standard_normal((3, 3)), np.array([0, 1, 1])
    eps, zp = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    return (lambda: vae_loss_new(gen, f, y, classifier, eps=eps, z_prior=zp)), gen.parameters()


@_solver_check
def _vae_old(rng):
    gen = _toy_generator(rng, 4)
    old = gen.snapshot()
    _jitter(gen, rng)
    y, z = np.array([0, 1, 1]), rng.standard_normal((3, 2))
    return (lambda: vae_loss_old(gen, old, 2, y=y, z=z)), gen.parameters()


@_solver_check
def _generator(rng):
    gen = _toy_generator(rng, 4)
    old = gen.snapshot()
    _jitter(gen, rng)
    classifier = Solver(_TOY, 4, rng).classifier.frozen_copy()
    f, y = rng.standard_normal((3, 3)), np.array([2, 3, 3])
    eps, zp = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    yo, zo = np.array([0, 1]), rng.standard_normal((2, 2))
    sched = LambdaSchedule.at_task(_SIZES, 1)

    def closure():
        new = vae_loss_new(gen, f, y, classifier, eps=eps, z_prior=zp)
        return generator_loss(new, vae_loss_old(gen, old, 2, y=yo, z=zo), sched, 1)
    return closure, gen.parameters()


COMPOSED: dict[str, Callable] = {
    "ce_final": _ce_final,
    "ce_inter": _ce_inter,
    "l2_final": _l2_final,
    "kl_inter": _kl_inter,
    "ce_new": _ce_new,
    "vae_loss_new": _vae_new,
    "vae_loss_old": _vae_old,
    "solver_loss_initial": _solver_initial,
    "solver_loss_incremental": _solver_incremental,
    "generator_loss": _generator,
}

ALL_CHECKS = {**PRIMITIVES, **COMPOSED}


def run_check(name: str, n_points: int = 10, seed: int = 0, eps: float = 1e-5) -> CheckResult:
    make = ALL_CHECKS[name]
    start = time.perf_counter()
    worst = 0.0
    for i in range(n_points):
        rng = np.random.default_rng([seed, i, sum(map(ord, name))])
        closure, points = make(rng)
        try:
            worst = max(worst, grad_check(closure, points, eps))
        except ArithmeticError:
            worst = float("inf")
    return CheckResult(name, worst, n_points, time.perf_counter() - start)


def run_suite(n_points: int = 10, seed: int = 0, names=None) -> list[CheckResult]:
    return [run_check(name, n_points, seed) for name in (names or ALL_CHECKS)]
