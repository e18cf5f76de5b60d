"""End-to-end class-incremental runs: training phases, evaluation, metrics and artifacts."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import METHODS, RunConfig
from .data_io import TaskStream, build_task_stream, load_idx_dataset, synth_gaussian_stream
from .errors import DomainError, NonFiniteLossError
from .generator import (Generator, GeneratorConfig, generator_loss, sample_features,
                        vae_loss_new, vae_loss_old)
from .losses import LambdaSchedule, ObjectiveTerms, solver_objective
from .optim import Adam, step_lr
from .solver import Solver, StageConfig, predict_labels

log = logging.getLogger(__name__)

_PURPOSES = {"init": 1, "expand": 2, "batches": 3, "replay": 4, "gen_init": 5, "gen_batches": 6,
             "gen_noise": 7}


def rng_for(seed: int, task: int, purpose: str) -> np.random.Generator:
    """Independent stream keyed by (seed, task, purpose)."""
    return np.random.default_rng([seed, task, _PURPOSES[purpose]])


# --------------------------------------------------------------------------
# method variants


@dataclass(frozen=True)
class Variant:
    name: str
    terms: ObjectiveTerms
    task_oriented: bool = True   # frozen-classifier CE in the generator loss
    generator: bool = True       # train a generator and replay its features
    joint: bool = False          # train on the union of all tasks so far


_BASE_TERMS = {
    "eTag": ObjectiveTerms(),
    "B0": ObjectiveTerms(self_supervised=False),
    "B1": ObjectiveTerms(aux_ce=False, embed_distill=False),
    "B2": ObjectiveTerms(aux_ce=False, embed_distill=False),
    "B3": ObjectiveTerms(),
    "Fine": ObjectiveTerms(feature_distill=False, embed_distill=False, replay=False),
    "Joint": ObjectiveTerms(feature_distill=False, embed_distill=False, replay=False),
}


def ablation_variant(name: str, config: RunConfig | None = None) -> Variant:
    """Loss wiring of a method name, specialised by the run-level flags in ``config``."""
    if name not in METHODS:
        raise DomainError(f"unknown variant {name!r}; choose from {', '.join(METHODS)}")
    terms = _BASE_TERMS[name]
    if config is not None:
        terms = dataclasses.replace(terms, ss_ce_incremental=config.ss_ce_incremental and terms.aux_ce,
                                    squared_l2=config.squared_l2, replay_support=config.replay_support)
    return Variant(
        name=name,
        terms=terms,
        task_oriented=name not in ("B1", "B3"),
        generator=name not in ("Fine", "Joint"),
        joint=name == "Joint",
    )


# --------------------------------------------------------------------------
# metrics


def cumulative_accuracy(acc_matrix, test_sizes, weighting: str = "sample") -> list[float]:
    """Accuracy on all tasks seen so far, after each task."""
    out = []
    for t, row in enumerate(acc_matrix):
        row = np.asarray(row, dtype=np.float64)
        if weighting == "sample":
            w = np.asarray(test_sizes[: t + 1], dtype=np.float64)
            out.append(float(np.dot(row, w) / w.sum()))
        else:
            out.append(float(row.mean()))
    return out


def metric_A(acc_matrix, test_sizes=None, weighting: str = "sample") -> float:
    """Average incremental accuracy: mean over steps of accuracy on all classes seen so far."""
    if test_sizes is None:
        test_sizes = [1] * len(acc_matrix)
    return float(np.mean(cumulative_accuracy(acc_matrix, test_sizes, weighting)))


def metric_F(acc_matrix) -> float:
    """Mean over old tasks of (best accuracy ever reached) - (final accuracy)."""
    T = len(acc_matrix)
    if T < 2:
        raise DomainError("forgetting needs at least two tasks")
    drops = []
    for j in range(T - 1):
        best = max(acc_matrix[t][j] for t in range(j, T))
        drops.append(best - acc_matrix[T - 1][j])
    return float(np.mean(drops))


# --------------------------------------------------------------------------
# evaluation


def _batched_features(extractor, x: np.ndarray, chunk: int = 1024) -> np.ndarray:
    return np.concatenate([extractor.features(x[i:i + chunk]).data for i in range(0, len(x), chunk)]) \
        if len(x) else np.zeros((0, extractor.config.feature_dim))


def predict_classes(solver: Solver, x: np.ndarray) -> np.ndarray:
    return predict_labels(solver.classifier, _batched_features(solver.extractor, x))


def evaluate(solver: Solver, stream: TaskStream, t: int) -> list[float]:
    """Single-head accuracy on each task 0..t; task identity is never used."""
    accs = []
    for task in stream.tasks[: t + 1]:
        pred = predict_classes(solver, task.x_test)
        accs.append(float(np.mean(pred == task.y_test)) if len(pred) else 0.0)
    return accs


def confusion_matrix(solver: Solver, stream: TaskStream, t: int) -> np.ndarray:
    n = sum(stream.task_sizes[: t + 1])
    cm = np.zeros((n, n), dtype=np.int64)
    for task in stream.tasks[: t + 1]:
        np.add.at(cm, (task.y_test, predict_classes(solver, task.x_test)), 1)
    return cm


# --------------------------------------------------------------------------
# training


@dataclass
class RunResult:
    config: RunConfig
    task_sizes: list[int]
    test_sizes: list[int]
    acc_matrix: list[list[float]]
    cumulative: list[float]
    A: float
    F: float | None
    confusion: np.ndarray
    curves: list[dict] = field(default_factory=list)
    solver: Solver | None = None
    generator: Generator | None = None

    def metrics(self) -> dict:
        return {
            "format": 1,
            "method": self.config.method,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "task_sizes": self.task_sizes,
            "test_sizes": self.test_sizes,
            "acc_matrix": self.acc_matrix,
            "cumulative_accuracy": self.cumulative,
            "A": self.A,
            "F": self.F,
            "confusion": self.confusion.tolist(),
        }


def build_stream(config: RunConfig) -> TaskStream:
    d = config.data
    seed = config.seed if d.stream_seed is None else d.stream_seed
    if d.source == "synthetic":
        return synth_gaussian_stream(d.n_classes, d.dim, d.separation, d.samples_per_class,
                                     seed=seed, n_tasks=d.n_tasks, first_fraction=d.first_fraction)
    if d.source == "idx":
        ds = load_idx_dataset(d.idx_train_images, d.idx_train_labels, d.idx_test_images, d.idx_test_labels)
        return build_task_stream(ds, d.n_tasks, d.first_fraction, seed)
    raise DomainError(f"unknown data source {d.source!r}")


def _check_finite(value: float, where: dict) -> None:
    if not np.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss at {where}", where)


def build_replay_batch(old_gen: Generator, n_learned: int, batch_size: int, rng):
    """Generated old-class features with labels drawn uniformly from the learned classes."""
    if batch_size == 0:
        return np.zeros((0, old_gen.config.feature_dim)), np.zeros(0, dtype=np.int64)
    labels = rng.integers(0, n_learned, size=batch_size)
    z = rng.standard_normal((batch_size, old_gen.config.latent_dim))
    return old_gen.decode(labels, z).data.copy(), labels


def train_solver(solver: Solver, snapshot: Solver | None, old_gen: Generator | None,
                 x: np.ndarray, y: np.ndarray, t: int, task_sizes: list[int],
                 variant: Variant, config: RunConfig) -> list[dict]:
    tc = config.train
    opt = Adam(solver.parameters(), lr=tc.solver_lr)
    batch_rng = rng_for(config.seed, t, "batches")
    replay_rng = rng_for(config.seed, t, "replay")
    schedule = LambdaSchedule.at_task(task_sizes, t)
    n_learned = schedule.m_prev_total
    curves = []
    for epoch in range(tc.solver_epochs):
        opt.lr = step_lr(tc.solver_lr, epoch, tc.solver_epochs, tc.lr_decay_at, tc.lr_decay_factor)
        order = batch_rng.permutation(len(y))
        sums: dict[str, float] = {}
        n_steps = 0
        for start in range(0, len(y), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            replay = None
            if t > 0 and variant.terms.replay and old_gen is not None and not variant.joint:
                replay = build_replay_batch(old_gen, n_learned, len(idx), replay_rng)
            loss, parts = solver_objective(solver, x[idx], y[idx], task_sizes, t, variant.terms,
                                           snapshot=snapshot, replay=replay, tau=config.tau,
                                           schedule=schedule, joint=variant.joint)
            _check_finite(parts["total"], {"phase": "solver", "task": t, "epoch": epoch,
                                            "step": n_steps, "parts": parts})
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_steps += 1
        curves.append({"task": t, "phase": "solver", "epoch": epoch, "lr": opt.lr,
                       **{k: v / max(n_steps, 1) for k, v in sums.items()}})
    return curves


def train_generator(gen: Generator, old_gen: Generator | None, solver: Solver,
                    x: np.ndarray, y: np.ndarray, t: int, task_sizes: list[int],
                    variant: Variant, config: RunConfig) -> list[dict]:
    """Fit the generator to the trained solver's features of the current task."""
    feats = _batched_features(solver.extractor, x)
    tc = config.train
    return fit_generator(gen, old_gen, feats, y, solver.classifier.frozen_copy(), task_sizes, t,
                         epochs=tc.generator_epochs, lr=tc.generator_lr, batch_size=tc.batch_size,
                         seed=config.seed, task_oriented=variant.task_oriented,
                         decay_at=tc.lr_decay_at, decay_factor=tc.lr_decay_factor)


def fit_generator(gen: Generator, old_gen: Generator | None, feats: np.ndarray, y: np.ndarray,
                  classifier, task_sizes: list[int], t: int, epochs: int, lr: float = 1e-3,
                  batch_size: int = 64, seed: int = 0, task_oriented: bool = True,
                  decay_at: float = 2 / 3, decay_factor: float = 0.1) -> list[dict]:
    """Minimise the task-t generator loss over (feats, y); returns per-epoch mean losses."""
    schedule = LambdaSchedule.at_task(task_sizes, t)
    n_learned = schedule.m_prev_total
    gen.n_seen = int(sum(task_sizes[: t + 1]))
    opt = Adam(gen.parameters(), lr=lr)
    batch_rng = rng_for(seed, t, "gen_batches")
    noise_rng = rng_for(seed, t, "gen_noise")
    curves = []
    for epoch in range(epochs):
        opt.lr = step_lr(lr, epoch, epochs, decay_at, decay_factor)
        order = batch_rng.permutation(len(y))
        sums: dict[str, float] = {}
        n_steps = 0
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            parts: dict[str, float] = {}
            new = vae_loss_new(gen, feats[idx], y[idx], classifier, rng=noise_rng,
                               task_oriented=task_oriented, parts=parts)
            old = None
            if t > 0 and old_gen is not None:
                old = vae_loss_old(gen, old_gen, n_learned, len(idx), rng=noise_rng)
                parts["reconstruct_old"] = old.item()
            loss = generator_loss(new, old, schedule, t)
            parts["total"] = loss.item()
            _check_finite(parts["total"], {"phase": "generator", "task": t, "epoch": epoch,
                                            "step": n_steps, "parts": parts})
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_steps += 1
        curves.append({"task": t, "phase": "generator", "epoch": epoch, "lr": opt.lr,
                       **{k: v / max(n_steps, 1) for k, v in sums.items()}})
    return curves


def run_cil(config: RunConfig, stream: TaskStream | None = None) -> RunResult:
    """Train task by task: solver, then generator, then evaluate on every task seen so far."""
    stream = stream if stream is not None else build_stream(config)
    variant = ablation_variant(config.method, config)
    sizes = stream.task_sizes
    h, w, c = stream.image_shape
    if h != w:
        raise DomainError(f"images must be square, got {h}x{w}")
    stage_cfg = StageConfig(widths=list(config.model.widths), in_channels=c, input_size=h,
                            stride=config.model.stride)
    solver = Solver(stage_cfg, sizes[0], rng_for(config.seed, 0, "init"))
    gen = None
    if variant.generator:
        gen = Generator(GeneratorConfig(stage_cfg.feature_dim, stream.n_classes, config.model.latent_dim,
                                        config.model.generator_hidden), rng_for(config.seed, 0, "gen_init"))
    acc_matrix: list[list[float]] = []
    curves: list[dict] = []
    for t, task in enumerate(stream.tasks):
        snapshot = old_gen = None
        if t > 0:
            snapshot = solver.snapshot()
            old_gen = gen.snapshot() if gen is not None else None
            solver.expand(task.m, rng_for(config.seed, t, "expand"))
        if variant.joint:
            x, y = stream.cumulative(t)
        else:
            x, y = task.x_train, task.y_train
        log.info("task %d of %d: %d classes, %d samples (%s)", t, len(stream), task.m, len(y), variant.name)
        curves += train_solver(solver, snapshot, old_gen, x, y, t, sizes, variant, config)
        if gen is not None:
            curves += train_generator(gen, old_gen, solver, task.x_train, task.y_train, t, sizes,
                                      variant, config)
        acc_matrix.append(evaluate(solver, stream, t))
        log.info("task %d accuracies: %s", t, ", ".join(f"{a:.3f}" for a in acc_matrix[-1]))
    test_sizes = [len(task.y_test) for task in stream.tasks]
    cumulative = cumulative_accuracy(acc_matrix, test_sizes, config.accuracy_weighting)
    return RunResult(
        config=config,
        task_sizes=sizes,
        test_sizes=test_sizes,
        acc_matrix=acc_matrix,
        cumulative=cumulative,
        A=float(np.mean(cumulative)),
        F=metric_F(acc_matrix) if len(acc_matrix) > 1 else None,
        confusion=confusion_matrix(solver, stream, len(stream) - 1),
        curves=curves,
        solver=solver,
        generator=gen,
    )


# --------------------------------------------------------------------------
# artifacts


def write_run(result: RunResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(result.metrics(), indent=2, sort_keys=True) + "\n")
    with open(out / "acc_matrix.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["after_task"] + [f"task_{j}" for j in range(len(result.acc_matrix))])
        for t, row in enumerate(result.acc_matrix):
            wr.writerow([t] + [repr(a) for a in row] + [""] * (len(result.acc_matrix) - len(row)))
    with open(out / "confusion.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["true\\pred"] + list(range(len(result.confusion))))
        for i, row in enumerate(result.confusion):
            wr.writerow([i] + row.tolist())
    keys: list[str] = []
    for row in result.curves:
        keys += [k for k in row if k not in keys]
    with open(out / "curves.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=keys, restval="")
        wr.writeheader()
        wr.writerows(result.curves)
    if result.solver is not None:
        result.solver.save(out / "solver.params")
    if result.generator is not None:
        result.generator.save(out / "generator.params")
    return out
