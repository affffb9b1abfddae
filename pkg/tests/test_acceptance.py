"""Acceptance criteria at their stated tolerances.

Each test records one PASS/FAIL line (printed in the terminal summary).
Experiments run at the desk profile; the whole module takes over an hour
on one core.
"""

import filecmp
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from amortlab.baselines import exact_ring_posterior, ols_fit
from amortlab.eval_uq import bootstrap_stability
from amortlab.flow_posterior import FlowModel, load_flow, odeint, sample_posterior
from amortlab.harness import bench_timing, make_config, read_csv, run_experiment, timing_medians
from amortlab.nn_core import Activation, grad_check
from amortlab.set_estimators import DeepSetsModel, LossKind, SetTransformerModel, batch_loss
from amortlab.task_gen import NoiseRegime, RingPriorSpec, gen_ring_task

from conftest import jitter, random_task, record_criterion
from test_baselines import grid_posterior
from test_flow_posterior import small_flow

pytestmark = pytest.mark.acceptance


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


def monotone_with_slack(values, max_inversions=1, rel=0.10):
    """Non-increasing except for at most ``max_inversions`` rises of at most ``rel``."""
    rises = [(a, b) for a, b in zip(values, values[1:]) if b > a]
    return len(rises) <= max_inversions and all(b <= (1 + rel) * a for a, b in rises)


@pytest.fixture(scope="session")
def run_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def desk_run(root, experiment, **overrides):
    cfg = make_config(experiment, "desk", {"output_dir": str(root / experiment), **overrides})
    _, seconds = timed(run_experiment, cfg)
    return cfg, Path(cfg.output_dir), seconds


@pytest.fixture(scope="session")
def latent_run(run_root):
    return desk_run(run_root, "LatentStructure", K_values=[5])


@pytest.fixture(scope="session")
def robust_run(run_root):
    return desk_run(run_root, "Robustness")


@pytest.fixture(scope="session")
def sparse_run(run_root):
    return desk_run(run_root, "SparseRecovery")


@pytest.fixture(scope="session")
def ring_run(run_root):
    return desk_run(run_root, "RingPosterior")


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    rng = np.random.default_rng(1)
    tasks = [random_task(rng, 3, n, seed=n) for n in (2, 5, 4)]
    models = {
        "deep_sets[relu]": DeepSetsModel.build(3, rng, hidden=6, encoder_layers=2, latent=5, decoder_layers=1),
        "deep_sets[tanh,mean]": DeepSetsModel.build(3, rng, hidden=6, latent=5, pool="mean", activation=Activation.TANH),
        "set_transformer": SetTransformerModel.build(3, rng, d_model=4, n_heads=2, n_blocks=2, ff_width=6),
        "sparse_set_transformer": SetTransformerModel.build(3, rng, d_model=4, n_heads=2, n_blocks=1, ff_width=6,
                                                            sparse=True),
        "deep_sets[quadratic]": DeepSetsModel.build(3, rng, hidden=6, latent=5, decoder_layers=1, features="quadratic"),
        "set_transformer[quadratic]": SetTransformerModel.build(3, rng, d_model=4, n_heads=2, n_blocks=1, ff_width=6,
                                                                features="quadratic"),
    }
    worst = {}
    t0 = time.perf_counter()
    for name, model in models.items():
        jitter(model.params(), rng)
        model.in_scale = np.array([0.7, 1.3, 0.9, 2.0])
        for loss in LossKind:
            worst[f"{name}/{loss.value}"] = grad_check(model, lambda m, l=loss: batch_loss(m, tasks, l))
    from amortlab.flow_posterior import FlowBatch, cfm_loss
    from amortlab.task_gen import sample_ring_batch

    rb = sample_ring_batch(RingPriorSpec(), 4, rng, 0, 5)
    fb = FlowBatch.draw(np.repeat(rb.beta, 2, axis=0), rng)
    for enc_layers in (0, 1):
        flow = small_flow(2, enc_layers=enc_layers)
        flow.context_encoder.in_scale = np.linspace(0.5, 2.0, 9)
        worst[f"flow[enc_layers={enc_layers}]/cfm"] = grad_check(flow, lambda m: cfm_loss(m, fb, rb))
    seconds = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and seconds < 60
    record_criterion("criterion 1", ok, f"max rel grad error {worst[top]:.2e} ({top}) over {len(worst)} cases, {seconds:.0f} s")
    assert ok, worst


# -- 2 ---------------------------------------------------------------------------------


def test_criterion_2_permutation_invariance():
    rng = np.random.default_rng(2)
    estimators = {
        "deep_sets": DeepSetsModel.build(4, rng, hidden=16, latent=16),
        "set_transformer": SetTransformerModel.build(4, rng, d_model=8, n_heads=2, n_blocks=2, ff_width=16),
        "sparse_set_transformer": SetTransformerModel.build(4, rng, d_model=8, n_heads=2, n_blocks=2, ff_width=16,
                                                            sparse=True),
        "deep_sets[quadratic]": DeepSetsModel.build(4, rng, hidden=16, latent=16, features="quadratic"),
    }
    t0 = time.perf_counter()
    worst = {}
    for name, model in estimators.items():
        jitter(model.params(), rng)
        diffs = []
        for i in range(100):
            task = random_task(rng, 4, int(rng.integers(1, 40)), seed=i)
            perm = rng.permutation(task.n_obs)
            shuffled = type(task)(task.inputs[perm], task.outputs[perm], task.beta_true, task.n_obs, "test", i)
            diffs.append(np.abs(model.estimate(task) - model.estimate(shuffled)).max())
        worst[name] = max(diffs)
    flow = small_flow(5)
    diffs = []
    spec = RingPriorSpec()
    for i in range(100):
        task = gen_ring_task(spec, int(rng.integers(1, 20)), i)
        perm = rng.permutation(task.n_obs)
        shuffled = type(task)(task.inputs[perm], task.outputs[perm], task.beta_true, task.n_obs, "ring", i)
        diffs.append(np.abs(flow.context(task) - flow.context(shuffled)).max())
    worst["flow_context"] = max(diffs)
    seconds = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-9 and seconds < 60
    record_criterion("criterion 2", ok, f"max shuffled-row difference {worst[top]:.1e} ({top}), 100 tasks each, {seconds:.0f} s")
    assert ok, worst


# -- 3 ---------------------------------------------------------------------------------


def test_criterion_3_ring_oracle_matches_quadrature():
    spec = RingPriorSpec()
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    tv = []
    for i in range(20):
        task = gen_ring_task(spec, int(rng.integers(0, 21)), 300 + i)
        pts, q = grid_posterior(task, spec)
        m = exact_ring_posterior(task, spec).pdf(pts)
        tv.append(0.5 * np.abs(q - m / m.sum()).sum())
    seconds = time.perf_counter() - t0
    ok = max(tv) < 1e-4 and seconds < 120
    record_criterion("criterion 3", ok, f"max grid total variation {max(tv):.1e} on 20 tasks, {seconds:.0f} s")
    assert ok


# -- 4 ---------------------------------------------------------------------------------


def test_criterion_4a_latent_structure_ordering(latent_run):
    cfg, run, seconds = latent_run
    row = read_csv(run / "table1.csv")[0]
    ols, ds, st = float(row["ols"]), float(row["deep_sets"]), float(row["set_transformer"])
    ok = st <= ds < 0.01 * ols and seconds < 15 * 60
    record_criterion("criterion 4a", ok, f"MSE_beta set_transformer {st:.4g} <= deep_sets {ds:.4g} < 0.01 x OLS {ols:.4g}; {seconds / 60:.1f} min")
    assert ok


def test_criterion_4b_latent_structure_oracle_bound(latent_run):
    cfg, run, seconds = latent_run
    row = read_csv(run / "table1.csv")[0]
    ds, st, oracle = float(row["deep_sets"]), float(row["set_transformer"]), float(row["bayes_oracle"])
    ok = ds <= 5 * oracle and st <= 5 * oracle
    record_criterion("criterion 4b", ok, f"deep_sets {ds:.4g}, set_transformer {st:.4g} vs 5 x Bayes-oracle MSE {5 * oracle:.3g}")
    assert ok


# -- 5 ---------------------------------------------------------------------------------


def test_criterion_5_robustness_trend(robust_run):
    cfg, run, seconds = robust_run
    rows = read_csv(run / "table2.csv")
    bad = []
    for model in cfg.models:
        for regime in cfg.regimes:
            curve = [float(r["mse"]) for e in (10, 50, 100) for r in rows
                     if r["model"] == model and r["regime"] == regime and int(r["epoch"]) == e]
            if len(curve) != 3 or not monotone_with_slack(curve, 1, 0.10):
                bad.append(f"{model}/{regime}: {curve}")
    ok = not bad and seconds < 20 * 60
    final = {(r["model"], r["regime"]): float(r["mse"]) for r in rows if int(r["epoch"]) == 100}
    detail = ", ".join(f"{m}/{g}={v:.3g}" for (m, g), v in final.items() if g == "gaussian")
    record_criterion("criterion 5", ok, f"held-out MSE decreasing over epochs 10/50/100 in {len(cfg.models) * len(cfg.regimes) - len(bad)}/"
                     f"{len(cfg.models) * len(cfg.regimes)} curves (epoch 100: {detail}); {seconds / 60:.1f} min"
                     + (f"; violations {bad}" if bad else ""))
    assert ok


# -- 6 ---------------------------------------------------------------------------------


def test_criterion_6_bootstrap_monotonicity(robust_run):
    cfg, run, _ = robust_run
    rows = read_csv(run / "bootstrap.csv")
    bad = []
    for regime in cfg.regimes:
        curve = [float(r["sigma_boot"]) for N in cfg.bootstrap_N for r in rows
                 if r["model"] == "set_transformer" and r["regime"] == regime and int(r["N"]) == N]
        if not monotone_with_slack(curve, 1, 0.05):
            bad.append(f"{regime}: {np.round(curve, 4).tolist()}")
    t0 = time.perf_counter()
    beta = np.linspace(-2, 2, cfg.p)
    ols_err = []
    for N in cfg.bootstrap_N:
        rep = bootstrap_stability(ols_fit, beta, N, cfg.bootstrap_B, NoiseRegime.gaussian(), 6)
        analytic = 1.0 / math.sqrt(N - cfg.p - 1)
        ols_err.append(abs(rep.sigma_boot - analytic) / analytic)
    seconds = time.perf_counter() - t0
    ok = not bad and max(ols_err) < 0.2
    record_criterion("criterion 6", ok, f"set_transformer sigma_boot non-increasing over N={list(cfg.bootstrap_N)} in "
                     f"{len(cfg.regimes) - len(bad)}/{len(cfg.regimes)} regimes; OLS vs analytic max rel error "
                     f"{max(ols_err):.3f} ({seconds:.0f} s)" + (f"; violations {bad}" if bad else ""))
    assert ok


# -- 7 ---------------------------------------------------------------------------------


def test_criterion_7_sparse_recovery(sparse_run):
    cfg, run, seconds = sparse_run
    rows = [r for r in read_csv(run / "sparse_cosine.csv") if int(r["epoch"]) == cfg.epochs]
    cos = {int(r["sparsity"]): float(r["cosine"]) for r in rows}
    low = {k: v for k, v in cos.items() if k <= 50}
    ok = bool(low) and min(low.values()) >= 0.85 and seconds < 15 * 60
    record_criterion("criterion 7", ok, f"mean cosine by sparsity {', '.join(f'k={k}: {v:.3f}' for k, v in sorted(cos.items()))}"
                     f" (need >= 0.85 for k <= 50); {seconds / 60:.1f} min")
    assert ok


# -- 8 ---------------------------------------------------------------------------------


def test_criterion_8_flow_posterior_fidelity(ring_run):
    cfg, run, seconds = ring_run
    cov = read_csv(run / "mode_coverage.csv")
    flow = [r for r in cov if r["method"] == "flow"]
    prior = [float(r["share"]) for r in flow if r["task"] == "prior"]
    info = [r for r in flow if r["task"] == "informative"]
    k = max(info, key=lambda r: float(r["exact_weight"]))
    share_gap = abs(float(k["share"]) - float(k["exact_weight"]))
    energy = {r["task"]: (float(r["energy_distance"]), float(r["null_q95"]))
              for r in read_csv(run / "energy.csv") if r["method"] == "flow"}
    ok_a = len(prior) == 8 and min(prior) >= 0.05
    ok_b = float(k["exact_weight"]) >= 0.99 and share_gap <= 0.05
    ok_c = all(energy[t][0] < energy[t][1] for t in ("prior", "default"))
    ok = ok_a and ok_b and ok_c and seconds < 20 * 60
    record_criterion("criterion 8", ok,
                     f"(a) min prior bucket share {min(prior):.3f} >= 0.05 {'ok' if ok_a else 'NO'}; "
                     f"(b) informative dominant share {float(k['share']):.3f} vs exact {float(k['exact_weight']):.3f} {'ok' if ok_b else 'NO'}; "
                     f"(c) energy/null-q95 " + ", ".join(f"{t} {e:.4f}/{q:.4f}" for t, (e, q) in energy.items())
                     + f" {'ok' if ok_c else 'NO'}; {seconds / 60:.1f} min")
    assert ok


# -- 9 ---------------------------------------------------------------------------------


def test_criterion_9_rk4_order():
    t0 = time.perf_counter()
    z0 = np.array([1.0, -0.5])
    errs = [np.abs(odeint(lambda t, z: z, z0, n) - math.e * z0).max() for n in (10, 20, 40, 80)]
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    seconds = time.perf_counter() - t0
    ok = all(12 <= r <= 20 for r in ratios) and seconds < 10
    record_criterion("criterion 9", ok, f"RK4 error ratios per step doubling {np.round(ratios, 2).tolist()}")
    assert ok


# -- 10 --------------------------------------------------------------------------------


def test_criterion_10_flow_faster_than_mcmc(ring_run, tmp_path):
    cfg, run, _ = ring_run
    model = load_flow(run / "models" / "flow.ckpt")
    path, seconds = timed(bench_timing, cfg, cfg.bench_tasks, tmp_path / "timing.csv", model)
    med = timing_medians(path)
    rows = [r for r in read_csv(path) if r["task_id"] != "median"]
    n_flow = np.median([int(r["n_samples"]) for r in rows if r["method"] == "flow"])
    ok = med["flow"] < med["mcmc"] and seconds < 5 * 60
    record_criterion("criterion 10", ok, f"median per-task wall time flow {med['flow']:.0f} ms vs MCMC {med['mcmc']:.0f} ms "
                     f"({cfg.bench_tasks} tasks, flow draws = chain ESS, median {n_flow:.0f}); {seconds:.0f} s")
    assert ok


# -- 11 --------------------------------------------------------------------------------

DETERMINISM_CONFIG = """{"experiment": "LatentStructure", "K_values": [5], "n_train": 200, "n_test": 50,
 "epochs": 4, "checkpoints": [2, 4], "ds_hidden": 32, "ds_latent": 32, "st_d_model": 16, "st_heads": 2, "st_ff": 32}"""


def test_criterion_11_determinism(tmp_path):
    cfg = tmp_path / "reduced.json"
    cfg.write_text(DETERMINISM_CONFIG, encoding="utf-8")
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        proc = subprocess.run([sys.executable, "-m", "amortlab", "reproduce", "table1", "--seed", "7",
                               "--config", str(cfg), "--out", str(out)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append(out)
    csvs = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.csv"))
    same = [filecmp.cmp(outs[0] / p, outs[1] / p, shallow=False) for p in csvs]
    ok = len(csvs) > 0 and all(same)
    record_criterion("criterion 11", ok, f"`reproduce table1 --seed 7` twice: {sum(same)}/{len(csvs)} CSV files (results and task data) byte-identical")
    assert ok
