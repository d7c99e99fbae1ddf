"""Acceptance gate: one PASS/FAIL line per criterion, each under its time budget."""

import itertools
import time

import numpy as np
import pytest

from acon.family import AconParams, acon_a, acon_b, acon_c, acon_c_dx, derivative_bounds
from acon.harness.data import spiral
from acon.harness.models import build_mlp, build_tfnet
from acon.harness.network import collect_beta_histogram, count_flops_params
from acon.harness.train import TrainConfig, train
from acon.smoothmax import smooth_max2
from acon.verify import gradcheck_acon_c, gradcheck_meta_acon, root_solver

# Final training accuracy of the reference spiral run below, pinned.
PINNED_SPIRAL_ACCURACY = 1.0


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, elapsed, budget, note=""):
        within = elapsed < budget
        status = "PASS" if ok and within else "FAIL"
        with capsys.disabled():
            print(f"\n[{status}] criterion {criterion}: {note} ({elapsed:.2f}s, budget {budget:g}s)")
        assert ok, note
        assert within, f"criterion {criterion} took {elapsed:.2f}s, budget {budget}s"
    return emit


def test_c1_derivative_bound_constants(report):
    t0 = time.perf_counter()
    ok = abs(root_solver() - 2.39936) <= 1e-5
    worst = 0.0
    for beta in (0.5, 1.0, 4.0):
        b = derivative_bounds(1.0, 0.0, beta)
        worst = max(worst, abs(b.upper - 1.0998), abs(b.lower + 0.0998))
    ok = ok and worst <= 5e-4
    report(1, ok, time.perf_counter() - t0, 1, f"bound constants, worst deviation {worst:.2e}")


def test_c2_slope_limits(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        p1, p2 = rng.uniform(-3, 3, 2)
        while abs(p1 - p2) < 1e-3:
            p2 = rng.uniform(-3, 3)
        beta = rng.uniform(0.05, 5)
        x = 1e3 / ((p1 - p2) * beta)
        hi = float(acon_c_dx(np.array(x), p1, p2, beta))
        lo = float(acon_c_dx(np.array(-x), p1, p2, beta))
        worst = max(worst, abs(hi - p1), abs(lo - p2))
    report(2, worst <= 1e-9, time.perf_counter() - t0, 1, f"slope limits, worst error {worst:.2e}")


def test_c3_smooth_max_limits(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    a, b = rng.uniform(-50, 50, (2, 10_000))
    mean_err = np.abs(smooth_max2(a, b, 0.0) - (a + b) / 2)
    mean_ok = bool(np.all(mean_err <= 4 * np.finfo(float).eps * np.maximum(np.maximum(abs(a), abs(b)), 1)))
    far = np.abs(a - b) >= 0.1
    max_err = float(np.max(np.abs(smooth_max2(a, b, 1e3) - np.maximum(a, b))[far]))
    ok = mean_ok and max_err <= 1e-9
    report(3, ok, time.perf_counter() - t0, 1, f"smooth max limits, hard-max error {max_err:.2e}")


def test_c4_family_collapse(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(scale=3, size=(2, 4, 3, 3))
        p, beta = rng.normal(size=4), rng.uniform(0.1, 3, 4)
        c = acon_c(x, AconParams(np.ones(4), p, beta))
        worst = max(worst, float(np.max(np.abs(c - acon_b(x, p, beta)))))
        worst = max(worst, float(np.max(np.abs(acon_b(x, np.zeros(4), beta) - acon_a(x, beta)))))
    report(4, worst <= 1e-14, time.perf_counter() - t0, 5, f"family collapse, worst difference {worst:.2e}")


def test_c5_gradient_fidelity(report):
    t0 = time.perf_counter()
    reports = []
    for seed in range(10):
        reports += gradcheck_acon_c(seed, tol=1e-6)
        for level in ("layer", "channel", "pixel"):
            reports += gradcheck_meta_acon(level, seed, tol=1e-6)
    worst = max(reports, key=lambda r: r.max_rel_err)
    ok = all(r.passed for r in reports)
    report(5, ok, time.perf_counter() - t0, 30,
           f"{len(reports)} gradient checks, worst {worst.target} at {worst.max_rel_err:.2e}")


@pytest.mark.parametrize("mult,flops,params", [(0.5, 41e6, 1.4e6), (2.0, 474e6, 3.8e6)])
def test_c6_tfnet_counts(report, mult, flops, params):
    t0 = time.perf_counter()
    f, p = count_flops_params(build_tfnet(mult, (3, 224, 224), 1000))
    df, dp = f / flops - 1, p / params - 1
    ok = abs(df) <= 0.10 and abs(dp) <= 0.10
    report(6, ok, time.perf_counter() - t0, 1,
           f"TFNet {mult}x: {f / 1e6:.1f}M FLOPs ({df:+.1%}), {p / 1e6:.2f}M params ({dp:+.1%})")


def _trained_hist(activation, samples):
    data = spiral()
    net = build_mlp(2, 2, (64, 64), activation, rng=np.random.default_rng(0), dtype=np.float64)
    train(net, data, TrainConfig(steps=500, seed=0))
    return collect_beta_histogram(net, samples, layer_index=3, bins=20).counts


def test_c7_per_sample_beta_histograms(report):
    t0 = time.perf_counter()
    data = spiral()
    samples = data.x[np.linspace(0, len(data) - 1, 7).astype(int)]
    assert len({tuple(s) for s in samples}) == 7
    meta = _trained_hist("meta-acon-channel", samples)
    plain = _trained_hist("acon-c", samples)
    pairs = list(itertools.combinations(range(7), 2))
    meta_same = sum(np.array_equal(meta[i], meta[j]) for i, j in pairs)
    plain_same = sum(np.array_equal(plain[i], plain[j]) for i, j in pairs)
    ok = meta_same == 0 and plain_same == len(pairs)
    report(7, ok, time.perf_counter() - t0, 120,
           f"identical histogram pairs: meta {meta_same}/{len(pairs)}, plain {plain_same}/{len(pairs)}")


def test_c8_spiral_training(report):
    t0 = time.perf_counter()

    def run():
        net = build_mlp(2, 2, (64, 64), "acon-c", rng=np.random.default_rng(1), dtype=np.float64)
        return train(net, spiral(), TrainConfig(steps=2000, seed=1))

    a, b = run(), run()
    deterministic = [(m.loss, m.accuracy) for m in a.steps] == [(m.loss, m.accuracy) for m in b.steps]
    ok = a.final_accuracy >= 0.95 and deterministic and a.final_accuracy == PINNED_SPIRAL_ACCURACY
    report(8, ok, time.perf_counter() - t0, 60,
           f"spiral accuracy {a.final_accuracy:.4f} (pinned {PINNED_SPIRAL_ACCURACY}), "
           f"deterministic={deterministic}")


def test_c9_large_scale_tables_out_of_scope(capsys):
    with capsys.disabled():
        print("\n[INFO] criterion 9: large-scale benchmark accuracy is not reproduced at desk scale; "
              "criteria 1-8 stand in for it")
