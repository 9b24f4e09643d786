"""Command line: ``lbt-lab {train,contour,dynamics,check,metrics,schema}``.

Exit codes: 0 ok, 2 config error, 3 numeric abort, 4 check failure.
Seed sweeps run one process per seed when ``--threads`` (or the
``LBT_LAB_THREADS`` environment variable) is above 1; each run is
single-threaded.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import SCHEMA, ConfigFileError, ExperimentConfig, canonical_hash
from .diffcore import Rng
from .distributions import QuadratureGrid, make_dataset
from .metrics import ModeSpec, evaluate_samples, kde_grid
from .models import ParametricMoGGenerator
from .studies import (
    contour_study,
    escape_config,
    gaussian_one_step_identity,
    gradcheck_suite,
    influence_sweep,
    ring_config,
    sensitivity_sweep,
    stationarity_check,
)
from .training import ConfigError, TrainConfig, Trajectory, TrainingAborted, fmt, train

log = logging.getLogger("lbt_lab")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_CHECK = 0, 2, 3, 4
_SAMPLE_STREAM = 31


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    resolved_config: dict
    seed: int | None
    code_version: str = __version__
    started: str = field(default_factory=_now)
    finished: str | None = None
    status: str = "running"
    outputs: list = field(default_factory=list)
    wall_time_s: float | None = None
    failure: dict | None = None
    notes: dict = field(default_factory=dict)

    def write(self, directory: Path):
        with open(directory / "manifest.json", "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finish(self, directory: Path, status: str, t0: float):
        self.status = status
        self.finished = _now()
        self.wall_time_s = time.perf_counter() - t0
        self.outputs = sorted(set(self.outputs) | {"manifest.json"})
        self.write(directory)


# --------------------------------------------------------------------------
# writers


def write_matrix_csv(path: Path, rows: np.ndarray, header: list[str]):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in np.atleast_2d(rows):
            fh.write(",".join(fmt(v) for v in r) + "\n")


def write_landscape_csv(path: Path, axis: np.ndarray, values: np.ndarray):
    """Row ``i`` is theta1 = axis[i]; column ``j`` is theta2 = axis[j]."""
    with open(path, "w", newline="") as fh:
        fh.write("theta1\\theta2," + ",".join(fmt(a) for a in axis) + "\n")
        for a, row in zip(axis, values):
            fh.write(fmt(a) + "," + ",".join(fmt(v) for v in row) + "\n")


def write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


class CsvTrajectoryWriter:
    """Appends trajectory rows as they are recorded."""

    def __init__(self, path: Path):
        self.path = path
        self.fh = None

    def __call__(self, traj: Trajectory, row: dict):
        if self.fh is None:
            self.fh = open(self.path, "w", newline="")
            self.fh.write(traj.csv_header())
        self.fh.write(traj.csv_row(row))
        self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


# --------------------------------------------------------------------------
# train


def final_samples(gen, n: int, seed: int, chunk: int = 50000) -> np.ndarray:
    rng = Rng(seed).spawn(_SAMPLE_STREAM)
    parts = [gen.sample(min(chunk, n - lo), rng) for lo in range(0, n, chunk)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, gen.out_dim))


def kde_for(samples: np.ndarray, data, spec: dict) -> tuple[QuadratureGrid, np.ndarray]:
    d = samples.shape[1]
    bounds = spec.get("bounds")
    if bounds is None:
        lo = np.floor(np.min(data.means - 5 * data.stds, axis=0) * 2) / 2
        hi = np.ceil(np.max(data.means + 5 * data.stds, axis=0) * 2) / 2
        bounds = list(zip(lo.tolist(), hi.tolist()))
    counts = list(spec.get("counts") or [160] * d)[:d]
    if len(bounds) != d or len(counts) != d:
        raise ConfigError(f"artifacts.kde needs {d} bounds and counts for this dataset")
    grid = QuadratureGrid(bounds, counts)
    return grid, kde_grid(samples, grid, spec.get("bandwidth"))


def run_training(cfg: TrainConfig, directory: Path, artifacts: dict, command: str = "train") -> int:
    """One seed: manifest, trajectory, final samples, metrics, KDE grid."""
    directory.mkdir(parents=True, exist_ok=True)
    resolved = {"train": cfg.to_dict(), "artifacts": artifacts}
    manifest = RunManifest(command, canonical_hash(resolved), resolved, cfg.seed,
                           notes={"weight_init": "xavier-uniform weights, zero biases",
                                  "csv_float_format": "%.17g"})
    manifest.write(directory)
    t0 = time.perf_counter()
    writer = CsvTrajectoryWriter(directory / "trajectory.csv")
    manifest.outputs.append("trajectory.csv")
    try:
        traj = train(cfg, writer)
    except TrainingAborted as exc:
        writer.close()
        manifest.failure = exc.failure
        manifest.finish(directory, "aborted", t0)
        log.error("seed %d aborted: %s", cfg.seed, exc)
        return EXIT_ABORT
    writer.close()
    manifest.notes["record_wall_times_s"] = traj.wall_times

    gen = traj.final["generator"]
    data = make_dataset(cfg.dataset)
    samples = final_samples(gen, int(artifacts["n_samples"]), cfg.seed)
    np.savetxt(directory / "samples.csv", samples, fmt="%.17g", delimiter=",",
               header=",".join(f"x{i}" for i in range(samples.shape[1])), comments="")
    if data.dim == 2:
        report = evaluate_samples(samples, ModeSpec.from_mixture(data)).to_dict()
    else:
        report = {"n": samples.shape[0], "mean": samples.mean(axis=0).tolist(),
                  "std": samples.std(axis=0).tolist(), "data_mean": data.mean().tolist()}
    if isinstance(gen, ParametricMoGGenerator):
        report["generator_means"] = gen.means().tolist()
    write_json(directory / "metrics.json", report)
    grid, dens = kde_for(samples, data, artifacts["kde"])
    axes = np.meshgrid(*[grid.axis(i) for i in range(grid.dim)], indexing="ij")
    cols = np.stack([a.reshape(-1) for a in axes] + [dens.reshape(-1)], axis=1)
    write_matrix_csv(directory / "kde.csv", cols, [f"x{i}" for i in range(grid.dim)] + ["density"])
    manifest.outputs += ["samples.csv", "metrics.json", "kde.csv"]
    manifest.finish(directory, "ok", t0)
    return EXIT_OK


def _train_job(args):
    cfg_dict, directory, artifacts, command = args
    return run_training(TrainConfig.from_dict(cfg_dict), Path(directory), artifacts, command)


def _sweep(jobs: list, threads: int) -> list[int]:
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_train_job, jobs))
    return [_train_job(j) for j in jobs]


def cmd_train(exp: ExperimentConfig, out: Path, seeds, threads: int) -> int:
    artifacts = exp.artifacts()
    jobs = [(exp.train_config(seed=s).to_dict(), str(out / f"seed_{s}"), artifacts, "train")
            for s in exp.seeds(seeds)]
    codes = _sweep(jobs, threads)
    return max(codes) if codes else EXIT_OK


# --------------------------------------------------------------------------
# contour


def cmd_contour(exp: ExperimentConfig, out: Path) -> int:
    c = exp.contour()
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("contour", canonical_hash(c), {"contour": c}, None)
    manifest.write(out)
    t0 = time.perf_counter()
    res = contour_study(c["low"], c["high"], c["step"], [tuple(s) for s in c["starts"]], c["lr"],
                        c["max_steps"], c["tol"])
    write_landscape_csv(out / "landscape_kl.csv", res["axis"], res["KL"])
    write_landscape_csv(out / "landscape_js.csv", res["axis"], res["JS"])
    write_json(out / "descent.json", {"axis": {"low": c["low"], "high": c["high"], "step": c["step"]},
                                      "quadrature": res["grid"], "argument_order": "KL(p_data || p_model)",
                                      "descent": res["descent"]})
    for d in res["descent"]:
        print(f"{d['kind']} descent from {d['start']} -> ({d['end'][0]:.4f}, {d['end'][1]:.4f}) "
              f"after {d['steps']} steps, |grad| = {d['grad_norm']:.2e}")
    manifest.outputs = ["landscape_kl.csv", "landscape_js.csv", "descent.json"]
    manifest.finish(out, "ok", t0)
    return EXIT_OK


# --------------------------------------------------------------------------
# dynamics


def cmd_dynamics(exp: ExperimentConfig, out: Path, seeds, threads: int) -> int:
    """GAN and LBT-GAN from identical initialisations, one pair per seed."""
    artifacts = exp.artifacts()
    artifacts["n_samples"] = min(artifacts["n_samples"], 100000)
    jobs = []
    for s in exp.seeds(seeds):
        for alg in ("gan", "lbt_gan"):
            cfg = exp.train_config(base=escape_config(alg), seed=s).to_dict()
            cfg["algorithm"] = alg
            jobs.append((cfg, str(out / f"seed_{s}" / alg), artifacts, "dynamics"))
    codes = _sweep(jobs, threads)
    summary = {}
    for s in exp.seeds(seeds):
        summary[s] = {}
        for alg in ("gan", "lbt_gan"):
            path = out / f"seed_{s}" / alg / "trajectory.csv"
            if path.exists():
                traj = Trajectory.from_csv(path.read_text())
                last = traj.rows[-1]
                summary[s][alg] = sorted(v for k, v in last.items() if k.startswith("theta_"))
    write_json(out / "dynamics_summary.json", {"final_sorted_means": summary})
    return max(codes) if codes else EXIT_OK


# --------------------------------------------------------------------------
# check


def _check_gradcheck(c: dict) -> tuple[bool, dict]:
    cases = gradcheck_suite(c["seed"])
    report = {"cases": [x.to_dict() for x in cases],
              "max_error_first_order": max(x.error for x in cases if x.order == 1),
              "max_error_second_order": max(x.error for x in cases if x.order == 2)}
    return all(x.passed for x in cases), report


def _check_influence(c: dict) -> tuple[bool, dict]:
    ident = gaussian_one_step_identity(seed=c["seed"])
    sweep = influence_sweep(c["influence_instances"], seed=c["seed"])
    ok = (ident["max_abs_error_vs_analytic"] <= 1e-12 and ident["max_abs_error_vs_engine"] <= 1e-12
          and sweep["n_instances"] == c["influence_instances"] and sweep["n_positive"] == sweep["n_instances"])
    return ok, {"one_step_identity": ident, "sweep": sweep}


def _check_stationarity(c: dict) -> tuple[bool, dict]:
    r = stationarity_check(c["stationarity_iterations"])
    return r["hypergradient_norm"] < 1e-6 and r["max_theta_drift"] < 1e-3, r


def sensitivity_verdict(curves: dict, threshold: float) -> dict:
    """Per-seed comparisons of the smallest and largest K and M settings."""
    ks, ms = sorted(curves["K"]), sorted(curves["M"])
    k_lo, k_hi, m_lo, m_hi = ks[0], ks[-1], ms[0], ms[-1]
    seeds = sorted(curves["K"][k_lo])
    k_wins, m_wins = {}, {}
    for s in seeds:
        k_wins[s] = curves["K"][k_hi][s]["f_G"][-1] >= curves["K"][k_lo][s]["f_G"][-1]
        reach = {}
        for m in (m_lo, m_hi):
            it, fg = curves["M"][m][s]["iteration"], curves["M"][m][s]["f_G"]
            hit = [i for i, v in zip(it, fg) if v >= threshold]
            reach[m] = hit[0] if hit else None
        m_wins[s] = reach[m_hi] is not None and (reach[m_lo] is None or reach[m_hi] < reach[m_lo])
    return {"K_pair": [k_lo, k_hi], "M_pair": [m_lo, m_hi], "f_G_threshold": threshold,
            "K_larger_not_worse": k_wins, "M_larger_reaches_first": m_wins,
            "K_fraction": sum(k_wins.values()) / len(seeds), "M_fraction": sum(m_wins.values()) / len(seeds)}


def _check_sensitivity(c: dict, exp: ExperimentConfig, seeds) -> tuple[bool, dict]:
    sc = c["sensitivity"]
    base = exp.train_config(base=ring_config("lbt", iterations=sc["iterations"], hidden=sc["hidden"],
                                             metric_samples=0))
    seeds = exp.seeds(seeds) if (seeds or "seeds" in exp.raw) else [0, 1, 2, 3, 4]
    curves = sensitivity_sweep(base, sc["K"], sc["M"], seeds)
    verdict = sensitivity_verdict(curves, sc["f_G_threshold"])
    ok = verdict["K_fraction"] >= 0.8 and verdict["M_fraction"] >= 0.8
    return ok, {"verdict": verdict, "curves": curves}


CHECKS = ("gradcheck", "influence", "stationarity", "sensitivity-KM")


def cmd_check(kind: str, exp: ExperimentConfig, out: Path, seeds) -> int:
    c = exp.check()
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if kind == "gradcheck":
        ok, report = _check_gradcheck(c)
    elif kind == "influence":
        ok, report = _check_influence(c)
    elif kind == "stationarity":
        ok, report = _check_stationarity(c)
    else:
        ok, report = _check_sensitivity(c, exp, seeds)
    report = {"check": kind, "passed": bool(ok), "settings": c, "wall_time_s": time.perf_counter() - t0,
              **report}
    name = f"check_{kind.replace('-', '_')}.json"
    write_json(out / name, report)
    print(f"{kind}: {'PASS' if ok else 'FAIL'} (report: {out / name})")
    return EXIT_OK if ok else EXIT_CHECK


# --------------------------------------------------------------------------
# metrics


def cmd_metrics(samples_path: Path, dataset: str, per_axis: bool, out: Path | None) -> int:
    samples = np.loadtxt(samples_path, delimiter=",", skiprows=1, ndmin=2)
    data = make_dataset(dataset)
    if data.dim != 2:
        raise ConfigError("the metrics subcommand needs a 2-D dataset")
    report = evaluate_samples(samples, ModeSpec.from_mixture(data), per_axis).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(text + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def _seed_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out or min(out) < 0:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lbt-lab", description="Bilevel generator training experiments")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", type=Path, required=config_required, help="JSON experiment config")
        sp.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
        sp.add_argument("--seeds", type=_seed_list, default=None, help="e.g. 0,1,2 or 0-4")
        sp.add_argument("--threads", type=int, default=None, help="parallel seed workers")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("train", help="run training per config and seed"), config_required=True)
    common(sub.add_parser("contour", help="KL/JS landscapes on the two-mode family"))
    common(sub.add_parser("dynamics", help="paired GAN / LBT-GAN runs on the bimodal toy"))
    chk = sub.add_parser("check", help="gradient, influence, stationarity and K/M checks")
    chk.add_argument("kind", choices=CHECKS)
    common(chk)
    met = sub.add_parser("metrics", help="evaluate a samples CSV against a dataset")
    met.add_argument("--samples", type=Path, required=True)
    met.add_argument("--dataset", default="ring8")
    met.add_argument("--per-axis", action="store_true", help="per-coordinate 3-sigma test")
    met.add_argument("--out", type=Path, default=None)
    met.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("schema", help="print the config JSON schema")
    return p


def resolve_threads(flag) -> int:
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get("LBT_LAB_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise ConfigError(f"LBT_LAB_THREADS must be an integer, got {env!r}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "schema":
        print(json.dumps(SCHEMA, indent=2))
        return EXIT_OK
    try:
        if args.command == "metrics":
            return cmd_metrics(args.samples, args.dataset, args.per_axis, args.out)
        exp = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        threads = resolve_threads(args.threads)
        if args.command == "train":
            return cmd_train(exp, args.out, args.seeds, threads)
        if args.command == "contour":
            return cmd_contour(exp, args.out)
        if args.command == "dynamics":
            return cmd_dynamics(exp, args.out, args.seeds, threads)
        return cmd_check(args.kind, exp, args.out, args.seeds)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
