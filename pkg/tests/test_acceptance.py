"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line, printed in the terminal summary.
"""

import math
import subprocess
import sys
import time

import numpy as np
import pytest
import yaml
from scipy.optimize import brentq
from scipy.special import softmax as scipy_softmax
from scipy.stats import entropy

from conftest import ACCEPTANCE_LINES
from etag import autodiff as ad
from etag.autodiff import Tensor
from etag.checks import ALL_CHECKS, TOLERANCE, run_suite
from etag.config import RunConfig
from etag.generator import Generator, GeneratorConfig, prior_kl, sample_features
from etag.harness import fit_generator, run_cil
from etag.losses import LambdaSchedule, kl_inter
from etag.solver import FinalClassifier, predict_labels

SEEDS = (0, 1, 2)


def record(criterion: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")


# --------------------------------------------------------------------------
# 1. gradient suite


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = run_suite(n_points=10)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_error)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and elapsed < 120 and {r.name for r in results} == set(ALL_CHECKS)
    record("1", ok, f"{len(results)} checks x 10 points, worst {worst.name} {worst.max_error:.2e} "
                    f"(< {TOLERANCE:g}), {elapsed:.0f}s (< 120s)" + (f", failed: {failed}" if failed else ""))
    assert not failed
    assert elapsed < 120


# --------------------------------------------------------------------------
# 2. analytic oracles


@pytest.mark.xfail(strict=True, reason="0.14384 is a 5-digit rounding of 0.1438410362, which is "
                                       "1.04e-6 away: tighter than the quoted value's own precision")
def test_criterion_2a_kl_oracle():
    val = ad.kl_divergence(Tensor([0.5, 0.5]), Tensor([0.25, 0.75])).item()
    exact = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    err = abs(val - 0.14384)
    record("2a", err <= 1e-6, f"KL([.5,.5]||[.25,.75]) = {val:.10f} (closed form {exact:.10f}); "
                              f"|value - 0.14384| = {err:.3e} vs tolerance 1e-6")
    assert err <= 1e-6


def test_criterion_2b_prior_kl_oracle():
    val = prior_kl(Tensor([[1.0]]), Tensor([[0.0]])).item()
    ok = abs(val - 0.5) <= 1e-9
    record("2b", ok, f"prior_kl(mu=1, var=1) = {val!r} (0.5 +- 1e-9)")
    assert ok


def test_criterion_2c_embedding_distillation_reduction():
    tau = 3.0

    def gap(a):
        return entropy([0.5, 0.5], scipy_softmax(np.array([a, 0.0]) / tau)) - 0.1

    a = brentq(gap, 0.0, 50.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    rows = 4 * 3
    per_pair = ad.kl_divergence(ad.softmax_with_temperature(Tensor([0.0, 0.0]), tau),
                                ad.softmax_with_temperature(Tensor([a, 0.0]), tau)).item()
    val = kl_inter([Tensor(np.tile([a, 0.0], (rows, 1)))] * 3, [np.zeros((rows, 2))] * 3, tau).item()
    ok = abs(val - 2.7) <= 1e-9
    record("2c", ok, f"L=4, tau=3, per-pair KL {per_pair:.12f} -> {val!r} (2.7 +- 1e-9)")
    assert ok


def test_criterion_2d_lambda_schedule():
    sizes = [50] + [10] * 5
    vals = [LambdaSchedule.at_task(sizes, t).value for t in range(1, 6)]
    ok = vals == [5, 6, 7, 8, 9]
    record("2d", ok, f"lambda for 50+5x10 at t=1..5: {vals}")
    assert ok


# --------------------------------------------------------------------------
# 3. generator oracle


def _two_class(seed, gap, n=1000):
    rng = np.random.default_rng([seed, 99])
    y = np.repeat([0, 1], n)
    f = rng.standard_normal((2 * n, 2))
    f[:, 0] += np.where(y == 0, -gap, gap)
    return f, y


def _sign_classifier():
    clf = FinalClassifier(2, 2, None, init="zeros")
    clf.weight.data[:] = [[-1.0, 0.0], [1.0, 0.0]]
    return clf.frozen_copy()


def _fit(seed, gap, task_oriented):
    f, y = _two_class(seed, gap)
    gen = Generator(GeneratorConfig(2, 2, latent_dim=2, hidden=32), np.random.default_rng(seed))
    fit_generator(gen, None, f, y, _sign_classifier(), [2], 0, epochs=30, seed=seed, task_oriented=task_oriented)
    return gen


def test_criterion_3a_generator_class_means():
    gen = _fit(0, 2.0, task_oriented=False)
    feats, labels = sample_features(gen, [0, 1], 1000, np.random.default_rng(11))
    errs = [float(np.linalg.norm(feats[labels == c].mean(0) - t)) for c, t in ((0, [-2, 0]), (1, [2, 0]))]
    ok = max(errs) < 0.3
    record("3a", ok, f"means (+-2,0), n=1000: distance of sample means {errs[0]:.3f}, {errs[1]:.3f} (< 0.3)")
    assert ok


def test_criterion_3b_task_oriented_generation():
    clf = _sign_classifier()
    scores = {}
    for task_oriented in (False, True):
        accs = []
        for seed in SEEDS:
            feats, labels = sample_features(_fit(seed, 0.2, task_oriented), [0, 1], 1000,
                                            np.random.default_rng(seed + 7))
            accs.append(float(np.mean(predict_labels(clf, feats) == labels)))
        scores[task_oriented] = float(np.mean(accs))
    ok = scores[True] > scores[False]
    record("3b", ok, f"frozen-classifier accuracy on generated features, 3 seeds: "
                     f"with task CE {scores[True]:.4f} vs without {scores[False]:.4f}")
    assert ok


# --------------------------------------------------------------------------
# 4 and 5. desk-scale class-incremental orderings (synthetic: 8 classes, 4 equal tasks)


class _Runs:
    def __init__(self):
        self.cache = {}

    def get(self, method):
        if method not in self.cache:
            res = []
            for seed in SEEDS:
                start = time.perf_counter()
                r = run_cil(RunConfig(method=method, seed=seed))
                res.append((r.A, r.F, time.perf_counter() - start))
            self.cache[method] = res
        rows = self.cache[method]
        return (np.array([r[0] for r in rows]), np.array([r[1] for r in rows]), sum(r[2] for r in rows))


@pytest.fixture(scope="module")
def runs():
    return _Runs()


def _fmt(a):
    return f"{100 * a.mean():.2f}+-{100 * a.std(ddof=1):.2f}"


def test_criterion_4_desk_scale_ordering(runs):
    A_e, F_e, t_e = runs.get("eTag")
    A_f, F_f, t_f = runs.get("Fine")
    A_j, F_j, t_j = runs.get("Joint")
    total = t_e + t_f + t_j
    checks = {
        "A(eTag) >= A(Fine) + 15": A_e.mean() >= A_f.mean() + 0.15,
        "F(eTag) < F(Fine)": F_e.mean() < F_f.mean(),
        "A(Joint) >= A(eTag)": A_j.mean() >= A_e.mean(),
        "runtime < 600s": total < 600,
    }
    ok = all(checks.values())
    record("4", ok, f"A eTag {_fmt(A_e)}, Fine {_fmt(A_f)}, Joint {_fmt(A_j)}; F eTag {_fmt(F_e)}, "
                    f"Fine {_fmt(F_f)}, Joint {_fmt(F_j)}; {total:.0f}s"
           + "".join(f"; {k} failed" for k, v in checks.items() if not v))
    assert ok, checks
    # harness invariant: Joint forgets no more than Fine on every seed
    assert np.all(F_j <= F_f)


def test_criterion_5_ablation_ordering(runs):
    A_e = runs.get("eTag")[0]
    A_1, A_2, A_3 = (runs.get(m)[0] for m in ("B1", "B2", "B3"))

    def pooled(a, b):
        return math.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2)

    checks = {
        "A(eTag) >= A(B1) + 3": A_e.mean() >= A_1.mean() + 0.03,
        "A(B2) >= A(B1) - pooled sd": A_2.mean() >= A_1.mean() - pooled(A_1, A_2),
        "A(B3) >= A(B1) - pooled sd": A_3.mean() >= A_1.mean() - pooled(A_1, A_3),
    }
    ok = all(checks.values())
    record("5", ok, f"A eTag {_fmt(A_e)}, B1 {_fmt(A_1)}, B2 {_fmt(A_2)}, B3 {_fmt(A_3)}"
           + "".join(f"; {k} failed" for k, v in checks.items() if not v))
    assert ok, checks


# --------------------------------------------------------------------------
# 6. determinism across invocations


def test_criterion_6_determinism(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"seed": 7, "data": {"samples_per_class": 60},
                                   "train": {"solver_epochs": 3, "generator_epochs": 3}}))
    blobs = []
    for name in ("first", "second"):
        out = tmp_path / name
        proc = subprocess.run([sys.executable, "-m", "etag", "train", "--config", str(cfg), "--out", str(out)],
                              capture_output=True, text=True, env={"ETAG_LOG_LEVEL": "error", "PATH": ""})
        assert proc.returncode == 0, proc.stderr
        blobs.append((out / "metrics.json").read_bytes())
    ok = blobs[0] == blobs[1]
    record("6", ok, f"two invocations, metrics.json {len(blobs[0])} bytes, byte-identical: {ok}")
    assert ok


# --------------------------------------------------------------------------
# 7. invariant suite

INVARIANTS = [
    "tests/test_losses.py::test_distillation_terms_vanish_at_teacher",
    "tests/test_losses.py::test_kl_inter_gradient_vanishes_at_teacher",
    "tests/test_solver.py::test_snapshot_is_frozen_and_immutable",
    "tests/test_harness.py::test_frozen_snapshots_untouched_during_training",
    "tests/test_losses.py::test_objective_uses_the_shared_schedule",
    "tests/test_generator.py::test_generator_loss_arithmetic",
    "tests/test_losses.py::test_lambda_grows_with_equal_increments",
    "tests/test_augmentation.py::test_bijection_and_recovery",
    "tests/test_autodiff.py::test_rotate90_four_times_identity_and_multiset",
    "tests/test_autodiff.py::test_softmax_normalized_equivariant_shift_invariant",
    "tests/test_autodiff.py::test_kl_nonnegative_and_zero_only_at_equality",
    "tests/test_harness.py::test_F_is_zero_for_nondecreasing_accuracies",
    "tests/test_harness.py::test_F_is_linear_and_nonnegative",
    "tests/test_generator.py::test_prior_kl_nonnegative_zero_only_at_prior",
    "tests/test_data_io.py::test_stream_partitions_classes_and_samples",
    "tests/test_autodiff.py::test_random_composed_graph_matches_finite_differences",
    "tests/test_losses.py::test_losses_nonnegative",
    "tests/test_solver.py::test_evaluation_never_touches_aux_heads",
    "tests/test_harness.py::test_evaluate_is_idempotent",
]


def test_criterion_7_invariant_suite(pytestconfig):
    root = pytestconfig.rootpath
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *INVARIANTS],
                          cwd=root, capture_output=True, text=True)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0
    record("7", ok, f"{len(INVARIANTS)} property tests: {summary}")
    assert ok, proc.stdout[-2000:]
