"""Project acceptance suite.

Each test exercises one numbered requirement end to end at its stated
tolerance and prints one PASS/FAIL line (visible with `pytest -s`).
"""

import json
import time

import numpy as np
import pytest

from dpflab import (
    Batch,
    SparsitySchedule,
    StepDecayLR,
    Strategy,
    TrainConfig,
    dpf_step,
    init_model,
    make_blobs,
    make_mlp_specs,
    make_state,
    maybe_update_mask,
    run_training,
    sparsity_at,
)
from dpflab.checkpoint import load_checkpoint
from dpflab.cli import main as cli_main
from dpflab.convexlab import (
    compare_one_shot,
    fit_loglog_slope,
    make_double_well,
    make_quadratic,
    run_nonconvex_rate,
    run_strongly_convex_rate,
    sample_index_linear_weight,
)
from dpflab.metrics import flip_count, last_change_curve
from dpflab.nets import backward, finite_diff_grad, forward
from dpflab.pruning import Mask, ScaledSignCompressor, compress, delta_of
from dpflab.training import steps_per_epoch

from conftest import brute_force_last_change


def report(num, name, ok, detail=""):
    print(f"\n[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {num:02d} ({name}): {detail}"


@pytest.fixture(scope="module")
def quad_kappa100():
    return make_quadratic(50, 1.0, 100.0, seed=0, noise_sigma=1.0)


@pytest.fixture(scope="module")
def blob_task():
    data = make_blobs(4, 20, 1000, 0.15, seed=1)
    spe = steps_per_epoch(data.n_train, 64)
    total = spe * 40
    lr = StepDecayLR(0.1, (total // 2, 3 * total // 4), 10.0)
    sched = SparsitySchedule(0.0, 0.9, 0, max(1, int(0.75 * total)), 16)
    return data, lr, sched, spe


@pytest.fixture(scope="module")
def dpf_blob_runs(blob_task):
    data, lr, sched, _ = blob_task
    runs = []
    for seed in range(5):
        model = init_model(make_mlp_specs([20, 64, 64, 4]), seed)
        cfg = TrainConfig(strategy=Strategy("dpf"), lr=lr, schedule=sched,
                          epochs=40, batch_size=64, seed=seed)
        runs.append(run_training(model, data, cfg))
    return runs


def test_01_error_feedback_identity():
    start = time.time()
    data = make_blobs(4, 10, 640, 0.2, seed=3)
    model = init_model(make_mlp_specs([10, 16, 4]), seed=0)
    cfg = TrainConfig(
        strategy=Strategy("dpf"),
        lr=StepDecayLR(0.1, (500, 750), 10.0),
        schedule=SparsitySchedule(0.0, 0.8, 0, 750, 16),
        batch_size=32,
        epochs=1,
        seed=0,
    )
    state = make_state(model.params.copy(), np.zeros(model.n_params), Mask.all_ones(model.prunable), 0)
    rng = np.random.default_rng(7)
    mismatches = 0
    for t in range(1000):
        if t % cfg.reparam_period == 0:
            state = maybe_update_mask(state, model, cfg)
        idx = rng.integers(0, data.n_train, size=32)
        batch = Batch(data.train_inputs[idx], data.train_labels[idx])
        lr = cfg.lr.at(t)
        executed = dpf_step(state, model, batch, lr, cfg)
        # second route: the same update written as a gradient at x + e
        perturbed = state.x + state.e
        _, cache = forward(model, perturbed, batch)
        g = backward(model, perturbed, batch, cache)
        v = cfg.momentum * state.v + g
        x = state.x - lr * (g + cfg.momentum * v)
        if not (np.array_equal(executed.x, x) and np.array_equal(executed.v, v)):
            mismatches += 1
        state = executed
    elapsed = time.time() - start
    report(1, "error-feedback identity", mismatches == 0 and elapsed < 10.0,
           f"mismatching steps={mismatches}/1000, {elapsed:.1f}s")


def test_02_gradient_oracle():
    start = time.time()
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        dims = [int(rng.integers(2, 6)), int(rng.integers(4, 12)), int(rng.integers(2, 5))]
        model = init_model(make_mlp_specs(dims), seed=int(rng.integers(0, 2**31)))
        batch = Batch(rng.standard_normal((8, dims[0])), rng.integers(0, dims[-1], size=8))
        _, cache = forward(model, model.params, batch)
        bp = backward(model, model.params, batch, cache)
        fd = finite_diff_grad(model, model.params, batch, h=1e-5)
        worst = max(worst, float((np.abs(bp - fd) / (1.0 + np.abs(fd))).max()))
    elapsed = time.time() - start
    report(2, "gradient oracle vs finite differences", worst <= 1e-6 and elapsed < 30.0,
           f"max rel err={worst:.2e}, {elapsed:.1f}s")


def test_03_strongly_convex_rate(quad_kappa100):
    start = time.time()
    horizons = [100, 1_000, 10_000, 100_000]
    medians = [
        float(np.median([run_strongly_convex_rate(quad_kappa100, 0.0, T, s).sampled_value for s in range(10)]))
        for T in horizons
    ]
    slope = fit_loglog_slope(horizons, medians)
    elapsed = time.time() - start
    report(3, "decaying-rate slope on the strongly convex problem",
           slope is not None and -1.3 <= slope <= -0.7 and elapsed < 120.0,
           f"slope={slope:.3f}, medians={[f'{m:.3g}' for m in medians]}, {elapsed:.0f}s")


def test_04_pruned_neighborhood(quad_kappa100):
    start = time.time()
    runs_4 = [run_strongly_convex_rate(quad_kappa100, 0.5, 10_000, s) for s in range(10)]
    runs_5 = [run_strongly_convex_rate(quad_kappa100, 0.5, 100_000, s) for s in range(10)]
    med4 = float(np.median([r.sampled_value for r in runs_4]))
    med5 = float(np.median([r.sampled_value for r in runs_5]))
    error_scale = quad_kappa100.lip * float(np.median([r.avg_pruning_term for r in runs_5]))
    plateau = med5 >= 0.5 * med4
    tied = med5 >= 0.01 * error_scale
    elapsed = time.time() - start
    report(4, "pruned run converges only to a neighborhood",
           plateau and tied and elapsed < 120.0,
           f"v(1e5)/v(1e4)={med5 / med4:.2f}, v/(L*avg term)={med5 / error_scale:.3f}, {elapsed:.0f}s")


def test_05_nonconvex_rate():
    start = time.time()
    toy = make_double_well(20, coupling=0.1, noise_sigma=0.5)
    horizons = [100, 1_000, 10_000]
    medians = [
        float(np.median([run_nonconvex_rate(toy, 0.0, T, s).sampled_value for s in range(10)]))
        for T in horizons
    ]
    slope = fit_loglog_slope(horizons, medians)
    elapsed = time.time() - start
    report(5, "gradient-norm slope on the double well",
           slope is not None and -0.8 <= slope <= -0.2 and elapsed < 120.0,
           f"slope={slope:.3f}, medians={[f'{m:.3g}' for m in medians]}, {elapsed:.0f}s")


def test_06_feedback_beats_one_shot(dpf_blob_runs, blob_task):
    start = time.time()
    quad = make_quadratic(20, 1.0, 100.0, seed=0, noise_sigma=1.0)
    pairs = [compare_one_shot(quad, 0.9, 10_000, s) for s in range(20)]
    fb = float(np.median([p.feedback_value for p in pairs]))
    os_ = float(np.median([p.one_shot_value for p in pairs]))

    data, lr, _, _ = blob_task
    dpf_accs = [r.records[-1].test_acc for r in dpf_blob_runs]
    os_accs = []
    for seed in range(5):
        model = init_model(make_mlp_specs([20, 64, 64, 4]), seed)
        cfg = TrainConfig(strategy=Strategy("one_shot_ft"), lr=lr,
                          schedule=SparsitySchedule.fixed(0.9),
                          epochs=40, batch_size=64, seed=seed, finetune_epochs=0)
        os_accs.append(run_training(model, data, cfg).records[-1].test_acc)
    quad_ok = fb <= os_
    blob_ok = float(np.median(dpf_accs)) >= float(np.median(os_accs))
    elapsed = time.time() - start
    report(6, "feedback training vs pruning at the end",
           quad_ok and blob_ok and elapsed < 300.0,
           f"quadratic {fb:.3g}<={os_:.3g}, blobs acc {np.median(dpf_accs):.3f}>={np.median(os_accs):.3f}, {elapsed:.0f}s")


def test_07_schedule_shape():
    s = SparsitySchedule(0.0, 0.8, t_0=100, ramp_steps=1000)
    endpoints = sparsity_at(s, 100) == 0.0 and sparsity_at(s, 1100) == 0.8
    grid = [sparsity_at(s, t) for t in range(0, 1300, 7)]
    monotone = all(a <= b + 1e-15 for a, b in zip(grid, grid[1:]))
    mid = sparsity_at(SparsitySchedule(0.0, 0.8, 0, 1000), 500)
    mid_ok = abs(mid - 0.7) <= 1e-12
    report(7, "cubic sparsity ramp", endpoints and monotone and mid_ok,
           f"midpoint={mid!r}")


def test_08_mask_convergence(dpf_blob_runs, blob_task):
    _, _, _, spe = blob_task
    total = spe * 40
    first, last = [], []
    curves_ok = True
    for res in dpf_blob_runs:
        events = list(res.mask_history)
        first.append(sum(flip_count(a[1], b[1]) for a, b in zip(events, events[1:]) if b[0] <= total / 4))
        last.append(sum(flip_count(a[1], b[1]) for a, b in zip(events, events[1:]) if b[0] > 3 * total / 4))
        curve = last_change_curve(res.mask_history, 40, spe)
        oracle = brute_force_last_change(res.mask_history, 40, spe)
        curves_ok &= bool(np.all(np.diff(curve) <= 1e-15)) and np.array_equal(curve, oracle)
    flips_ok = float(np.median(last)) < float(np.median(first))
    report(8, "mask convergence over training", flips_ok and curves_ok,
           f"median flips first quarter={np.median(first):.0f}, last={np.median(last):.0f}")


def test_09_incremental_monotonicity():
    data = make_blobs(4, 20, 1000, 0.15, seed=1)
    spe = steps_per_epoch(data.n_train, 32)  # 25 steps per epoch, 40 epochs = 1000 steps
    total = spe * 40
    model = init_model(make_mlp_specs([20, 32, 4]), seed=0)
    cfg = TrainConfig(
        strategy=Strategy("incremental", monotone=True),
        lr=StepDecayLR(0.1, (total // 2, 3 * total // 4), 10.0),
        schedule=SparsitySchedule(0.0, 0.9, 0, max(1, int(0.75 * total)), 16),
        epochs=40, batch_size=32, seed=0,
    )
    res = run_training(model, data, cfg)
    masks = res.mask_history.masks
    grown = sum(bool((b.bits & ~a.bits).any()) for a, b in zip(masks, masks[1:]))
    report(9, "monotone incremental support never grows",
           grown == 0 and res.state.t >= 1000,
           f"updates checked={len(masks) - 1}, steps={res.state.t}")


def test_10_scaled_sign_quality():
    rng = np.random.default_rng(23)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(int(rng.integers(2, 80)))
        out, _ = compress(ScaledSignCompressor(), x, 0.0)
        closed_form = 1.0 - np.abs(x).sum() ** 2 / (x.size * float(x @ x))
        worst = max(worst, abs(delta_of(x, out) - closed_form))
    report(10, "sign-quantizer error matches closed form", worst <= 1e-12,
           f"max |measured - closed form|={worst:.2e}")


def test_11_determinism_and_resume(tmp_path):
    cfg = {
        "run_id": "toy",
        "dataset.kind": "blobs", "dataset.classes": 3, "dataset.dim": 6,
        "dataset.n": 150, "dataset.noise": 0.1, "dataset.seed": 1,
        "model.hidden": [16],
        "train.strategy": "dpf", "train.epochs": 6, "train.batch_size": 32,
        "train.seed": 0, "sparsity.final": 0.7,
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    a, b, split = tmp_path / "a", tmp_path / "b", tmp_path / "split"
    assert cli_main(["train", "--config", str(cfg_path), "--out", str(a)]) == 0
    assert cli_main(["train", "--config", str(cfg_path), "--out", str(b)]) == 0
    identical = (a / "toy/metrics.csv").read_bytes() == (b / "toy/metrics.csv").read_bytes()

    assert cli_main(["train", "--config", str(cfg_path), "--out", str(split), "--stop-epoch", "3"]) == 0
    ckpt = split / "toy/checkpoint_epoch3.dpfc"
    assert cli_main(["train", "--config", str(cfg_path), "--out", str(split), "--resume", str(ckpt)]) == 0
    straight = load_checkpoint(a / "toy/final_dense.dpfc")
    resumed = load_checkpoint(split / "toy/final_dense.dpfc")
    resume_ok = (
        np.array_equal(straight.params, resumed.params)
        and np.array_equal(straight.momentum, resumed.momentum)
        and np.array_equal(straight.mask_bits, resumed.mask_bits)
    )
    report(11, "byte-determinism and checkpoint resume", identical and resume_ok,
           f"metrics identical={identical}, resume bit-identical={resume_ok}")


def test_12_weighted_iterate_sampler_law():
    T, n = 9, 1_000_000
    rng = np.random.default_rng(101)
    draws = sample_index_linear_weight(T, rng, size=n)
    freqs = np.bincount(draws, minlength=T + 1) / n
    probs = 2.0 * (np.arange(T + 1) + 1) / ((T + 1) * (T + 2))
    se = np.sqrt(probs * (1.0 - probs) / n)
    deviations = np.abs(freqs - probs) / se
    report(12, "weighted iterate sampler matches its law", float(deviations.max()) <= 3.0,
           f"max deviation={deviations.max():.2f} standard errors")
