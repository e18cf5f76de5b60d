import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from etag.config import RunConfig
from etag.data_io import TaskSpec, TaskStream, synth_gaussian_stream
from etag.errors import DomainError, NonFiniteLossError
from etag.generator import Generator, GeneratorConfig
from etag.harness import (ablation_variant, build_replay_batch, cumulative_accuracy, evaluate, metric_A,
                          metric_F, rng_for, run_cil, write_run)
from etag.losses import ObjectiveTerms
from etag.solver import Solver, StageConfig


def tiny(method="eTag", seed=0, **train):
    raw = {"method": method, "seed": seed,
           "data": {"samples_per_class": 40},
           "train": {"solver_epochs": 2, "generator_epochs": 2, **train}}
    return RunConfig.from_dict(raw)


# --------------------------------------------------------------------------
# metrics


def test_metric_A_examples():
    assert metric_A([[0.9], [0.6, 0.6]], [10, 10]) == pytest.approx(0.75)
    assert metric_A([[0.4], [0.4, 0.4], [0.4, 0.4, 0.4]]) == pytest.approx(0.4)
    assert metric_A([[0.83]]) == pytest.approx(0.83)


def test_metric_A_weighting():
    acc = [[1.0], [1.0, 0.0]]
    assert cumulative_accuracy(acc, [30, 10]) == [1.0, 0.75]
    assert cumulative_accuracy(acc, [30, 10], "task") == [1.0, 0.5]
    assert metric_A(acc, [30, 10], "task") == pytest.approx(0.75)


def test_metric_F_examples():
    assert metric_F([[0.9], [0.7, 0.8]]) == pytest.approx(0.2)
    assert metric_F([[0.5], [0.6, 0.9], [0.7, 0.9, 0.4]]) == 0.0
    with pytest.raises(DomainError):
        metric_F([[0.9]])


def lower_triangular(n_max=6):
    return st.integers(2, n_max).flatmap(lambda T: st.lists(
        st.lists(st.floats(0, 1), min_size=T, max_size=T), min_size=T, max_size=T).map(
        lambda rows: [r[: t + 1] for t, r in enumerate(rows)]))


@given(lower_triangular())
def test_F_is_zero_for_nondecreasing_accuracies(acc):
    T = len(acc)
    mono = [[max(acc[s][j] for s in range(j, t + 1)) for j in range(t + 1)] for t in range(T)]
    assert metric_F(mono) == 0.0


@given(lower_triangular())
def test_F_is_linear_and_nonnegative(acc):
    half = [[0.5 * a for a in row] for row in acc]
    assert metric_F(half) == pytest.approx(0.5 * metric_F(acc), abs=1e-12)
    assert metric_F(acc) >= 0


# --------------------------------------------------------------------------
# variants


def test_variant_wiring():
    b1 = ablation_variant("B1")
    assert (b1.terms.feature_distill, b1.terms.replay, b1.terms.aux_ce, b1.terms.embed_distill) == \
        (True, True, False, False)
    assert not b1.task_oriented and b1.generator
    b2, b3 = ablation_variant("B2"), ablation_variant("B3")
    assert b2.terms == b1.terms and b2.task_oriented
    assert b3.terms.embed_distill and b3.terms.aux_ce and not b3.task_oriented
    etag = ablation_variant("eTag")
    assert etag.terms == ObjectiveTerms() and etag.task_oriented
    b0 = ablation_variant("B0")
    assert b0.terms == dataclasses.replace(etag.terms, self_supervised=False) and b0.task_oriented
    fine, joint = ablation_variant("Fine"), ablation_variant("Joint")
    for v in (fine, joint):
        assert not (v.generator or v.terms.feature_distill or v.terms.embed_distill or v.terms.replay)
    assert joint.joint and not fine.joint
    with pytest.raises(DomainError):
        ablation_variant("B4")


def test_variant_picks_up_run_flags():
    cfg = RunConfig.from_dict({"ss_ce_incremental": True, "squared_l2": True, "replay_support": "old"})
    v = ablation_variant("eTag", cfg)
    assert v.terms.ss_ce_incremental and v.terms.squared_l2 and v.terms.replay_support == "old"
    assert not ablation_variant("B1", cfg).terms.ss_ce_incremental


# --------------------------------------------------------------------------
# evaluation


def _stream(n_classes, sep, n_tasks, samples=60, seed=0):
    return synth_gaussian_stream(n_classes, 16, sep, samples, seed=seed, n_tasks=n_tasks)


def test_single_task_memorized():
    stream = _stream(2, 12.0, 1)
    cfg = tiny(solver_epochs=15)
    result = run_cil(cfg, stream)
    assert result.acc_matrix == [[1.0]]


def test_random_classifier_near_chance():
    stream = _stream(4, 0.0, 1, samples=500)
    solver = Solver(StageConfig(widths=[4, 8], input_size=4), 4, np.random.default_rng(0))
    acc = evaluate(solver, stream, 0)[0]
    n = len(stream[0].y_test)
    assert abs(acc - 0.25) <= 3 * np.sqrt(0.25 * 0.75 / n)


def test_relabeling_tasks_permutes_accuracies():
    stream = _stream(6, 3.0, 3)
    solver = Solver(StageConfig(widths=[4, 8], input_size=4), 6, np.random.default_rng(1))
    base = evaluate(solver, stream, 2)
    order = [2, 0, 1]
    new_ids = np.concatenate([stream[k].classes for k in order])  # old global id at each new position
    remap = np.empty(6, dtype=np.int64)
    remap[new_ids] = np.arange(6)
    tasks = []
    for k in order:
        t = stream[k]
        tasks.append(TaskSpec(remap[t.classes], t.source_classes, t.x_train, remap[t.y_train],
                              t.x_test, remap[t.y_test]))
    solver.classifier.weight.data = solver.classifier.weight.data[new_ids]
    assert evaluate(solver, TaskStream(tuple(tasks)), 2) == [base[k] for k in order]


def test_evaluate_is_idempotent():
    stream = _stream(4, 3.0, 2)
    solver = Solver(StageConfig(widths=[4, 8], input_size=4), 4, np.random.default_rng(2))
    before = [p.data.copy() for p in solver.parameters()]
    assert evaluate(solver, stream, 1) == evaluate(solver, stream, 1)
    assert all(p.data.tobytes() == b.tobytes() for p, b in zip(solver.parameters(), before))


# --------------------------------------------------------------------------
# replay batches


def test_replay_batch_contract():
    gen = Generator(GeneratorConfig(4, 6, 2, 8), np.random.default_rng(0)).frozen_copy()
    gen.n_seen = 6
    f, y = build_replay_batch(gen, 3, 0, np.random.default_rng(0))
    assert f.shape == (0, 4) and y.size == 0
    f, y = build_replay_batch(gen, 3, 9000, np.random.default_rng(1))
    assert isinstance(f, np.ndarray) and f.shape == (9000, 4)
    counts = np.bincount(y, minlength=3)
    assert len(counts) == 3
    assert np.all(np.abs(counts - 3000) <= 3 * np.sqrt(9000 * (1 / 3) * (2 / 3)))


def test_rng_streams_are_keyed():
    a = rng_for(0, 1, "batches").integers(1 << 30, size=4)
    assert a.tolist() == rng_for(0, 1, "batches").integers(1 << 30, size=4).tolist()
    assert a.tolist() != rng_for(0, 2, "batches").integers(1 << 30, size=4).tolist()
    assert a.tolist() != rng_for(0, 1, "replay").integers(1 << 30, size=4).tolist()


# --------------------------------------------------------------------------
# end to end


def test_run_shapes_and_determinism(tmp_path):
    r1, r2 = run_cil(tiny(seed=3)), run_cil(tiny(seed=3))
    assert [len(row) for row in r1.acc_matrix] == [1, 2, 3, 4]
    assert all(0 <= a <= 1 for row in r1.acc_matrix for a in row)
    assert r1.A == pytest.approx(metric_A(r1.acc_matrix, r1.test_sizes))
    assert r1.F == pytest.approx(metric_F(r1.acc_matrix))
    assert r1.confusion.sum() == sum(r1.test_sizes)
    write_run(r1, tmp_path / "a")
    write_run(r2, tmp_path / "b")
    for name in ("metrics.json", "acc_matrix.csv", "confusion.csv", "curves.csv", "solver.params",
                 "generator.params"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_frozen_snapshots_untouched_during_training(monkeypatch):
    captured = []
    orig_s, orig_g = Solver.snapshot, Generator.snapshot

    def capture(orig):
        def snap(self):
            out = orig(self)
            captured.append((out, [p.data.copy() for p in out.parameters()]))
            return out
        return snap

    monkeypatch.setattr(Solver, "snapshot", capture(orig_s))
    monkeypatch.setattr(Generator, "snapshot", capture(orig_g))
    run_cil(tiny(seed=1))
    assert len(captured) >= 6
    for obj, arrays in captured:
        assert all(p.data.tobytes() == a.tobytes() for p, a in zip(obj.parameters(), arrays))


def test_fine_forgets_the_first_task():
    r = run_cil(RunConfig.from_dict({"method": "Fine", "train": {"solver_epochs": 20}}))
    assert r.acc_matrix[0][0] > 0.8
    assert r.acc_matrix[-1][0] < r.acc_matrix[0][0] - 0.5


def test_nan_loss_aborts_with_diagnostics(monkeypatch):
    import etag.harness as harness

    def poisoned(*args, **kwargs):
        loss, parts = orig(*args, **kwargs)
        parts["total"] = float("nan")
        return loss, parts

    orig = harness.solver_objective
    monkeypatch.setattr(harness, "solver_objective", poisoned)
    with pytest.raises(NonFiniteLossError) as err:
        run_cil(tiny())
    assert err.value.diagnostics["phase"] == "solver"
    assert err.value.diagnostics["task"] == 0 and err.value.diagnostics["epoch"] == 0
