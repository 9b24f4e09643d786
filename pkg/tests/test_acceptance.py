"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The long experiment checks carry the ``slow`` marker; deselect them with
``-m "not slow"``. The reduced 25-mode grid check is extended and only runs
when ``LBT_LAB_EXTENDED=1``.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import record
from lbt_lab.cli import sensitivity_verdict
from lbt_lab.config import CHECK_DEFAULTS
from lbt_lab.diffcore import Rng
from lbt_lab.distributions import make_dataset, mog_sample
from lbt_lab.metrics import ModeSpec, evaluate_samples, high_quality_mask
from lbt_lab.studies import (
    FIRST_ORDER_TOL,
    SECOND_ORDER_TOL,
    contour_study,
    escape_config,
    gaussian_one_step_identity,
    gradcheck_suite,
    influence_sweep,
    lattice_index,
    mean_matching_config,
    ring_config,
    sensitivity_sweep,
    stationarity_check,
    strict_local_min,
)
from lbt_lab.training import train
from oracles import brute_force_metrics, random_case

SEEDS = range(5)


def test_gradient_checks():
    t0 = time.perf_counter()
    cases = gradcheck_suite(0)
    elapsed = time.perf_counter() - t0
    first = max(c.error for c in cases if c.order == 1)
    second = max(c.error for c in cases if c.order == 2)
    ok = first < FIRST_ORDER_TOL and second < SECOND_ORDER_TOL and elapsed < 60 and all(c.passed for c in cases)
    record(1, ok, f"({len(cases)} objectives, first order {first:.1e}, second order {second:.1e}, "
                  f"{elapsed:.1f}s)")
    assert ok


def test_divergence_landscape_optima():
    t0 = time.perf_counter()
    res = contour_study()
    elapsed = time.perf_counter() - t0
    axis = res["axis"]
    i = lattice_index(axis, -3.0)
    js_min = strict_local_min(res["JS"], i, i)
    ends = {d["kind"]: np.array(d["end"]) for d in res["descent"]}
    js_dist = float(np.linalg.norm(ends["JS"] - [-3.0, -3.0]))
    kl_dist = float(np.linalg.norm(ends["KL"] - [-3.0, 3.0]))
    ok = js_min and js_dist <= 0.3 and kl_dist <= 0.05 and elapsed < 300
    record(2, ok, f"(JS strict local min at (-3,-3): {js_min}, JS descent end {ends['JS'].round(3).tolist()} "
                  f"dist {js_dist:.3f}, KL descent end {ends['KL'].round(3).tolist()} dist {kl_dist:.3f}, "
                  f"{elapsed:.0f}s)")
    assert ok


def _final_means(traj):
    last = traj.rows[-1]
    return np.sort([v for k, v in last.items() if k.startswith("theta_")])


@pytest.mark.slow
def test_escape_from_collapse():
    t0 = time.perf_counter()
    lbt_ok = gan_ok = 0
    finals = {}
    for s in SEEDS:
        lbt = _final_means(train(escape_config("lbt_gan", seed=s)))
        gan = _final_means(train(escape_config("gan", seed=s)))
        finals[s] = (lbt.round(2).tolist(), gan.round(2).tolist())
        lbt_ok += bool(np.all(np.abs(lbt - [-3.0, 3.0]) <= 0.3))
        gan_ok += bool(np.all(np.abs(gan + 3.0) <= 0.5))
    elapsed = time.perf_counter() - t0
    ok = lbt_ok >= 4 and gan_ok >= 4 and elapsed < 600
    record(3, ok, f"(LBT-GAN escaped {lbt_ok}/5, GAN stayed collapsed {gan_ok}/5, {elapsed:.0f}s; "
                  f"final sorted means lbt_gan/gan per seed {finals})")
    assert ok


def test_mean_matching():
    gaps = []
    for s in SEEDS:
        traj = train(mean_matching_config(seed=s))
        # equal-weight two-mean generator: its mean is the average of the means
        gaps.append(abs(float(np.mean(_final_means(traj)))))
    hits = sum(g < 0.2 for g in gaps)
    ok = hits >= 4
    record(4, ok, f"(|E_G - E_D| < 0.2 in {hits}/5 seeds, gaps {np.round(gaps, 4).tolist()})")
    assert ok


def test_stationarity():
    r = stationarity_check(500)
    ok = r["hypergradient_norm"] < 1e-6 and r["max_theta_drift"] < 1e-3
    record(5, ok, f"(hypergradient norm {r['hypergradient_norm']:.1e}, drift over 500 iterations "
                  f"{r['max_theta_drift']:.1e})")
    assert ok


def test_unrolled_and_influence_sensitivities_agree():
    ident = gaussian_one_step_identity()
    sweep = influence_sweep(20)
    err = max(ident["max_abs_error_vs_analytic"], ident["max_abs_error_vs_engine"])
    ok = err <= 1e-12 and sweep["n_instances"] == 20 and sweep["n_positive"] == 20
    record(6, ok, f"(one-step identity error {err:.1e}, positive inner products "
                  f"{sweep['n_positive']}/{sweep['n_instances']}, redrawn fits {sweep['rejected_fits']})")
    assert ok


def _ring_final(algorithm, seed, dataset="ring8"):
    cfg = ring_config(algorithm, seed=seed)
    if dataset != "ring8":
        d = cfg.to_dict()
        d["dataset"] = dataset
        cfg = type(cfg).from_dict(d)
    last = train(cfg).rows[-1]
    return int(last["modes_covered"]), float(last["hq_fraction"])


@pytest.mark.slow
def test_ring_coverage():
    t0 = time.perf_counter()
    results = {s: {alg: _ring_final(alg, s) for alg in ("lbt_gan", "gan")} for s in SEEDS}
    elapsed = time.perf_counter() - t0
    covered = sum(r["lbt_gan"][0] == 8 and r["lbt_gan"][1] > 0.7 for r in results.values())
    gan_fewer = sum(r["gan"][0] < r["lbt_gan"][0] for r in results.values())
    ok = covered >= 4 and gan_fewer >= 3 and elapsed < 45 * 60
    record(7, ok, f"(LBT-GAN 8/8 with HQ > 0.7 in {covered}/5 seeds, GAN fewer modes in {gan_fewer}/5, "
                  f"{elapsed / 60:.1f} min; modes/HQ per seed "
                  f"{ {s: {a: (m, round(h, 3)) for a, (m, h) in r.items()} for s, r in results.items()} })")
    assert ok


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("LBT_LAB_EXTENDED") != "1", reason="extended check, set LBT_LAB_EXTENDED=1")
def test_grid25_coverage_extended():
    finals = [_ring_final("lbt_gan", s, dataset="grid25") for s in SEEDS]
    hits = sum(m >= 24 for m, _ in finals)
    print(f"extended grid25: >= 24/25 modes in {hits}/5 seeds, {finals}")
    assert hits >= 3


@pytest.mark.slow
def test_longer_unrolls_and_more_estimator_steps_help():
    sc = CHECK_DEFAULTS["sensitivity"]
    base = ring_config("lbt", iterations=sc["iterations"], hidden=sc["hidden"], metric_samples=0)
    curves = sensitivity_sweep(base, Ks=(1, 15), Ms=(5, 50), seeds=SEEDS)
    v = sensitivity_verdict(curves, sc["f_G_threshold"])
    ok = v["K_fraction"] >= 0.8 and v["M_fraction"] >= 0.8
    finals = {k: [round(curves["K"][k][s]["f_G"][-1], 3) for s in SEEDS] for k in (1, 15)}
    record(8, ok, f"(K=15 final f_G >= K=1 in {round(5 * v['K_fraction'])}/5 seeds, M=50 reaches "
                  f"f_G >= {sc['f_G_threshold']} first in {round(5 * v['M_fraction'])}/5; final f_G by K {finals})")
    assert ok


def test_metric_oracles():
    exact = 0
    for seed in range(50):
        x, modes = random_case(seed)
        flags, index, counts, covered, avg, per_mode = brute_force_metrics(
            x.tolist(), modes.means.tolist(), modes.stds.tolist())
        is_hq, idx = high_quality_mask(x, modes)
        r = evaluate_samples(x, modes)
        same_kl = r.intra_mode_kl == avg or (np.isnan(avg) and np.isnan(r.intra_mode_kl))
        exact += (is_hq.tolist() == flags and idx.tolist() == index and r.mode_counts == counts
                  and r.modes_covered == covered and r.hq_fraction == sum(flags) / len(flags) and same_kl
                  and np.array_equal(np.array(r.per_mode_kl), np.array(per_mode), equal_nan=True))
    ring = make_dataset("ring8")
    hq = float(high_quality_mask(mog_sample(ring, 50000, Rng(0)), ModeSpec.from_mixture(ring))[0].mean())
    ok = exact == 50 and abs(hq - 0.98889) <= 0.003
    record(9, ok, f"(exact agreement on {exact}/50 cases, true-sample HQ {hq:.5f})")
    assert ok


TINY_RUN = {"train": {"algorithm": "lbt_gan", "dataset": "ring8", "generator": {"hidden": [8]},
                      "estimator": {"hidden": [8]}, "discriminator": {"hidden": [8]}, "unroll": {"K": 2},
                      "M": 2, "batch_size": 16, "iterations": 6, "eval_every": 2, "eval_size": 64,
                      "metric_samples": 100},
            "artifacts": {"n_samples": 200, "kde": {"counts": [10, 10]}}}


def test_trajectories_are_byte_identical(tmp_path):
    pairs = []
    # separate interpreter processes through the command line
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(TINY_RUN, indent=2))
    for out in ("a", "b"):
        subprocess.run([sys.executable, "-m", "lbt_lab", "train", "--config", str(cfg), "--out",
                        str(tmp_path / out), "--seeds", "0,3"], check=True, capture_output=True)
    for s in (0, 3):
        pairs.append(((tmp_path / f"a/seed_{s}/trajectory.csv").read_bytes(),
                      (tmp_path / f"b/seed_{s}/trajectory.csv").read_bytes()))
    # in-process runs of the presets
    for make in (lambda s: escape_config("lbt_gan", seed=s, iterations=30),
                 lambda s: escape_config("gan", seed=s, iterations=30),
                 lambda s: mean_matching_config(seed=s, iterations=30),
                 lambda s: ring_config("lbt_gan", seed=s, iterations=4, hidden=8, K=2, M=2, metric_samples=100)):
        for s in (0, 1):
            pairs.append(tuple(train(make(s)).to_csv().encode() for _ in range(2)))
    same = sum(a == b for a, b in pairs)
    ok = same == len(pairs)
    record(10, ok, f"({same}/{len(pairs)} (config, seed) pairs byte-identical)")
    assert ok
