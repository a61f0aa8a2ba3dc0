"""Command-line driver: ``gen``, ``run``, ``eval`` and ``compare``.

Output directories are laid out as::

    data/  manifest.json timing.json leadfield.{npy,json} dataset_000/ ...
    run/   manifest.json timing.json dataset_000/{output.json, traces.csv,
           n_pmf.csv, intensity.csv, representative.json} ...
    eval/  manifest.json dataset_000.csv ... aggregate.csv
    cmp/   manifest.json compare.json compare.csv

``manifest.json`` lists every other file with its sha256. Wall-clock time
goes to ``timing.json`` only, so all other files are reproducible from the
seed. Exit codes: 0 success, 2 configuration error, 3 data error, 4
numerical collapse.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, ExperimentConfig, from_dict, load_config
from .forward import GeometryConfig, GeometryError, build_geometry, compute_leadfield, load_leadfield, save_leadfield
from .metrics import DipolePointSet, adct, ospa, sd, wm
from .model import estimate_noise
from .proposals import TikhonovError, TikhonovOperator
from .smc import VARIANTS, FilterConfig, NumericalCollapse, run
from .synthgen import dataset_seeds, generate

log = logging.getLogger("dipolefilter")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_COLLAPSE = 0, 2, 3, 4
WORKERS_ENV = "DIPOLEFILTER_WORKERS"

EVIDENCE_CAVEAT = (
    "Static parameters (noise variances, birth/death rates, moment scales) are held "
    "fixed at their configured values, so each log-evidence is a profile likelihood "
    "over them; gaps compare models under those settings and are not fully marginal."
)
SIGN_CONVENTION = (
    "gap = log-evidence(reference) - log-evidence(other); positive values favour the "
    "reference, which is the first --run directory."
)


def _dataset_name(i: int) -> str:
    return f"dataset_{i:03d}"


def _workers(flag: int | None) -> int:
    if flag is not None:
        n = flag
    else:
        try:
            n = int(os.environ.get(WORKERS_ENV, "1"))
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer") from exc
    if n < 1:
        raise ConfigError("worker count must be at least 1")
    return n


def _map(fn, jobs, workers: int, initializer=None, initargs=()):
    """Ordered map over ``jobs``, in-process for one worker."""
    if workers == 1 or len(jobs) <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers, initializer=initializer, initargs=initargs) as ex:
        return list(ex.map(fn, jobs))


def _write_manifest(out: Path, kind: str, payload: dict) -> None:
    io.write_json(out / "manifest.json", io.MANIFEST_SCHEMA,
                  {"kind": kind, **payload, "files": io.hash_tree(out)})


def _child_seed(seed: int, index: int) -> int:
    state = np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0]
    return int(state >> 1)


# -- gen ------------------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig, out: Path, workers: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    sensors, grid = build_geometry(cfg.geometry)
    leadfield = compute_leadfield(grid, sensors, cfg.geometry.conductor_radius_m)
    save_leadfield(leadfield, out / "leadfield", cfg.geometry)
    seeds = dataset_seeds(cfg.scenario)
    for i, seed in enumerate(seeds):
        record = generate(cfg.scenario, grid, sensors, leadfield, seed=seed)
        io.save_dataset(out / _dataset_name(i), record, grid)
    _write_manifest(out, "datasets", {
        "config": cfg.as_dict(),
        "seeds": seeds,
        "datasets": [_dataset_name(i) for i in range(len(seeds))],
        "grid_size": grid.size,
        "n_sensors": sensors.count,
    })
    io.write_json(out / "timing.json", io.TIMING_SCHEMA, {"wall_seconds": time.perf_counter() - t0})


# -- run --------------------------------------------------------------------------

_CTX: dict = {}


def _init_worker(data_dir: str, cfg_dict: dict) -> None:
    cfg = from_dict(cfg_dict)
    _, grid = build_geometry(cfg.geometry)
    try:
        leadfield = load_leadfield(Path(data_dir) / "leadfield", cfg.geometry)
    except (FileNotFoundError, KeyError) as exc:
        raise io.DataError(f"leadfield missing in {data_dir}") from exc
    _CTX.update(cfg=cfg, grid=grid, leadfield=leadfield, tikhonov=None)


def _tikhonov():
    if _CTX["tikhonov"] is None:
        _CTX["tikhonov"] = TikhonovOperator(_CTX["leadfield"], _CTX["cfg"].proposal)
    return _CTX["tikhonov"]


def _filter_dataset(job):
    """Run one filter on one dataset; returns ``(name, seconds, error, stats)``."""
    name, data_dir, out_dir, fcfg, summarize_steps = job
    cfg, grid, leadfield = _CTX["cfg"], _CTX["grid"], _CTX["leadfield"]
    t0 = time.perf_counter()
    meas, pre = io.load_measurements(Path(data_dir) / name)
    if meas.shape[1] != leadfield.n_sensors:
        raise io.DataError(f"{name}: {meas.shape[1]} sensors, leadfield has {leadfield.n_sensors}")
    try:
        noise = estimate_noise(pre, pooled=cfg.noise_estimate == "pooled")
    except ValueError as exc:
        raise io.DataError(f"{name}: {exc}") from exc
    model = cfg.model.with_noise(noise)
    tik = _tikhonov() if fcfg.proposal == "designed" else None
    try:
        output = run(fcfg, meas, model, leadfield, grid, proposal=cfg.proposal, tikhonov=tik,
                     summarize=summarize_steps)
    except NumericalCollapse as exc:
        return name, time.perf_counter() - t0, str(exc), None
    if summarize_steps:
        io.save_filter_output(Path(out_dir) / name, output, {
            "dataset": name, "variant": _variant_name(fcfg), "seed": fcfg.seed,
            "noise_variance": noise})
    stats = {"T": len(meas), "mean_n_dipoles": output.mean_n_dipoles,
             "mean_lifetime": output.mean_lifetime, "eval_counts": output.eval_counts}
    return name, time.perf_counter() - t0, None, stats


def _variant_name(fcfg: FilterConfig) -> str:
    for name, spec in VARIANTS.items():
        if all(getattr(fcfg, k) == v for k, v in spec.items()):
            return name
    return "custom"


def cost_factor(variant: str, n_dip: float, t_life: float, n_neighbours: float) -> float:
    """Likelihood evaluations per particle per step under the cost model."""
    spec = VARIANTS[variant]
    factor = 1.0
    if spec["proposal"] == "designed":
        factor += n_dip
        if spec["model"] == "rw":
            factor += n_dip * n_neighbours
    if spec["move"]:
        factor += n_dip * t_life / 2.0
    return factor


def cmd_run(cfg: ExperimentConfig, data: Path, out: Path, workers: int, matched_budget: bool) -> None:
    manifest = io.read_json(data / "manifest.json", io.MANIFEST_SCHEMA)
    names = manifest.get("datasets", [])
    if not names:
        raise io.DataError(f"{data} holds no datasets")
    data_cfg = from_dict(manifest["config"])
    if data_cfg.geometry != cfg.geometry:
        raise ConfigError("geometry in the config differs from the one the datasets were generated with")
    out.mkdir(parents=True, exist_ok=True)
    fs = cfg.filter
    t0 = time.perf_counter()
    base = FilterConfig.from_variant(fs.variant, n_particles=fs.n_particles, seed=fs.seed,
                                     adaptive_resampling=fs.adaptive_resampling, ess_threshold=fs.ess_threshold)
    n_particles = fs.n_particles
    pilot = None
    _init_worker(str(data), cfg.as_dict())
    if matched_budget:
        pcfg = replace(base, n_particles=fs.pilot_particles, seed=_child_seed(fs.seed, 1 << 20))
        _, _, err, stats = _filter_dataset((names[0], str(data), str(out), pcfg, False))
        if err:
            raise NumericalCollapse(f"pilot run: {err}")
        grid = _CTX["grid"]
        _, degree = grid.padded_neighbors("rw")
        n_nb = float(np.mean(degree + 1))
        factor = cost_factor(fs.variant, stats["mean_n_dipoles"], stats["mean_lifetime"], n_nb)
        n_particles = max(2, int(round(fs.n_particles / factor)))
        pilot = {"dataset": names[0], "pilot_particles": fs.pilot_particles, **stats,
                 "mean_rw_candidates": n_nb, "cost_factor": factor,
                 "budget_per_step": fs.n_particles, "n_particles": n_particles}
    jobs = [(name, str(data), str(out), replace(base, n_particles=n_particles, seed=_child_seed(fs.seed, i)), True)
            for i, name in enumerate(names)]
    results = _map(_filter_dataset, jobs, workers, _init_worker, (str(data), cfg.as_dict()))
    failures = [(name, err) for name, _, err, _ in results if err]
    _write_manifest(out, "filter-run", {
        "config": cfg.as_dict(),
        "data_manifest_sha256": io.file_hash(data / "manifest.json"),
        "variant": fs.variant,
        "n_particles": n_particles,
        "seeds": {job[0]: job[3].seed for job in jobs},
        "matched_budget": pilot,
        "eval_counts": {name: stats["eval_counts"] for name, _, err, stats in results if not err},
        "collapsed": dict(failures),
    })
    io.write_json(out / "timing.json", io.TIMING_SCHEMA, {
        "wall_seconds": time.perf_counter() - t0,
        "per_dataset_seconds": {name: sec for name, sec, _, _ in results},
        "workers": workers,
    })
    if failures:
        raise NumericalCollapse(f"weights collapsed on {len(failures)} dataset(s): {failures[0][0]}")


# -- eval -------------------------------------------------------------------------

METRIC_COLUMNS = ["adct", "sd", "ospa", "wm"]


def dataset_metrics(estimates, truths, grid, wm_sigma: float) -> np.ndarray:
    """Rows ``(t, adct, sd, ospa, wm, n_est, n_true)``; NaN marks undefined values."""
    rows = []
    for t, ((idx, mom), (tloc, tmom)) in enumerate(zip(estimates, truths), start=1):
        est = DipolePointSet(grid.points[idx] if len(idx) else np.zeros((0, 3)), mom)
        tgt = DipolePointSet(tloc, tmom)
        rows.append([t, adct(est, tgt), sd(est, tgt), ospa(est, tgt), wm(est, tgt, grid, wm_sigma),
                     est.count, tgt.count])
    return np.array(rows, dtype=float).reshape(-1, 7)


def aggregate(tables: list[np.ndarray]) -> np.ndarray:
    """Per time step mean and standard error of each metric across datasets (NaN skipped)."""
    stack = np.stack([t[:, 1:5] for t in tables])  # (datasets, T, 4)
    n = np.sum(~np.isnan(stack), axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.nanmean(np.where(n > 0, stack, 0.0), axis=0) if len(tables) else stack[0]
        mean = np.where(n > 0, mean, np.nan)
        dev = np.where(np.isnan(stack), 0.0, stack - mean) ** 2
        var = np.where(n > 1, dev.sum(axis=0) / np.maximum(n - 1, 1), np.nan)
        se = np.where(n > 1, np.sqrt(var / n), np.where(n == 1, 0.0, np.nan))
    t = tables[0][:, :1]
    out = [t]
    for k in range(4):
        out += [mean[:, k : k + 1], se[:, k : k + 1], n[:, k : k + 1].astype(float)]
    return np.hstack(out)


def cmd_eval(cfg: ExperimentConfig, data: Path, run_dir: Path, out: Path) -> None:
    manifest = io.read_json(data / "manifest.json", io.MANIFEST_SCHEMA)
    run_manifest = io.read_json(run_dir / "manifest.json", io.MANIFEST_SCHEMA)
    geometry = GeometryConfig(**manifest["config"]["geometry"])
    _, grid = build_geometry(geometry)
    out.mkdir(parents=True, exist_ok=True)
    header = ["t"] + METRIC_COLUMNS + ["n_est", "n_true"]
    tables = []
    names = [n for n in manifest["datasets"] if n not in run_manifest.get("collapsed", {})]
    if not names:
        raise io.DataError("no completed filter outputs to evaluate")
    for name in names:
        estimates = io.load_representative(run_dir / name)
        truths = io.load_truth(data / name)
        if len(estimates) != len(truths):
            raise io.DataError(f"{name}: {len(estimates)} estimated steps, {len(truths)} true steps")
        table = dataset_metrics(estimates, truths, grid, cfg.metrics.wm_sigma_m)
        io.write_csv(out / f"{name}.csv", header,
                     ([int(r[0]), *r[1:5], int(r[5]), int(r[6])] for r in table))
        tables.append(table)
    agg = aggregate(tables)
    agg_header = ["t"] + [f"{m}_{s}" for m in METRIC_COLUMNS for s in ("mean", "se", "n")]
    io.write_csv(out / "aggregate.csv", agg_header,
                 ([int(r[0]), *[int(v) if j % 3 == 2 else v for j, v in enumerate(r[1:])]] for r in agg))
    overall = {m: float(np.nanmean(np.concatenate([t[:, 1 + k] for t in tables])))
               if np.any(~np.isnan(np.concatenate([t[:, 1 + k] for t in tables]))) else None
               for k, m in enumerate(METRIC_COLUMNS)}
    _write_manifest(out, "evaluation", {
        "run_manifest_sha256": io.file_hash(run_dir / "manifest.json"),
        "datasets": names,
        "wm_sigma_m": cfg.metrics.wm_sigma_m,
        "overall_mean": overall,
    })


# -- compare ----------------------------------------------------------------------


def evidence_gaps(reference: np.ndarray, other: np.ndarray) -> np.ndarray:
    """Per-step gap ``reference - other`` of cumulative log-evidence traces."""
    reference, other = np.asarray(reference, dtype=float), np.asarray(other, dtype=float)
    if reference.shape != other.shape:
        raise io.DataError("evidence traces differ in length")
    return reference - other


def cmd_compare(runs: list[Path], out: Path) -> None:
    if len(runs) < 2:
        raise ConfigError("compare needs at least two --run directories")
    manifests = [io.read_json(r / "manifest.json", io.MANIFEST_SCHEMA) for r in runs]
    labels = [m.get("variant", r.name) for m, r in zip(manifests, runs)]
    labels = [f"{lab}@{r.name}" if labels.count(lab) > 1 else lab for lab, r in zip(labels, runs)]
    common = sorted(set.intersection(*[
        {p.parent.name for p in r.glob("dataset_*/output.json")} for r in runs]))
    if not common:
        raise io.DataError("the runs share no completed datasets")
    out.mkdir(parents=True, exist_ok=True)
    rows, per_dataset = [], {}
    for name in common:
        traces = [np.asarray(io.read_json(r / name / "output.json", io.OUTPUT_SCHEMA)["cum_log_evidence"],
                             dtype=float) for r in runs]
        gaps = [evidence_gaps(traces[0], tr) for tr in traces[1:]]
        for t in range(len(traces[0])):
            rows.append([name, t + 1, *[tr[t] for tr in traces], *[g[t] for g in gaps]])
        per_dataset[name] = {lab: float(g[-1]) for lab, g in zip(labels[1:], gaps)}
    header = (["dataset", "t"] + [f"cum_log_evidence[{lab}]" for lab in labels]
              + [f"gap[{labels[0]} - {lab}]" for lab in labels[1:]])
    io.write_csv(out / "compare.csv", header, rows)
    summary = {}
    for lab in labels[1:]:
        g = np.array([per_dataset[n][lab] for n in common])
        summary[lab] = {
            "mean_terminal_gap": float(g.mean()),
            "se_terminal_gap": float(g.std(ddof=1) / np.sqrt(len(g))) if len(g) > 1 else 0.0,
            "fraction_favouring_reference": float(np.mean(g > 0)),
        }
    io.write_json(out / "compare.json", io.COMPARE_SCHEMA, {
        "caveat": EVIDENCE_CAVEAT,
        "sign_convention": SIGN_CONVENTION,
        "reference": labels[0],
        "runs": [r.name for r in runs],
        "terminal_gaps": per_dataset,
        "summary": summary,
    })
    _write_manifest(out, "comparison", {"labels": labels, "datasets": common})


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dipolefilter", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic datasets")
    g.add_argument("--config", type=Path)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int, help="override scenario.seed")
    g.add_argument("--workers", type=int)

    r = sub.add_parser("run", help="run a particle filter over every dataset")
    r.add_argument("--config", type=Path)
    r.add_argument("--data", type=Path, required=True)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--variant", choices=sorted(VARIANTS))
    r.add_argument("--particles", type=int, help="particle count, or the bootstrap-equivalent budget "
                   "with --matched-budget")
    r.add_argument("--seed", type=int, help="override filter.seed")
    r.add_argument("--workers", type=int, help=f"parallel datasets (default ${WORKERS_ENV} or 1)")
    r.add_argument("--matched-budget", action="store_true",
                   help="scale the particle count so likelihood evaluations match a bootstrap "
                   "filter with --particles particles")

    e = sub.add_parser("eval", help="score representative sets against the truth")
    e.add_argument("--config", type=Path)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--run", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("compare", help="tabulate log-evidence gaps between runs")
    c.add_argument("--run", type=Path, action="append", required=True,
                   help="run directory; repeat, the first is the reference")
    c.add_argument("--out", type=Path, required=True)
    return p


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.command == "gen" and args.seed is not None:
        cfg = replace(cfg, scenario=replace(cfg.scenario, seed=args.seed))
    if args.command == "run":
        changes = {}
        if args.variant is not None:
            changes["variant"] = args.variant
        if args.particles is not None:
            changes["n_particles"] = args.particles
        if args.seed is not None:
            changes["seed"] = args.seed
        if changes:
            fs = replace(cfg.filter, **changes)
            fs.validate()
            cfg = replace(cfg, filter=fs)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            cmd_compare(args.run, args.out)
            return EXIT_OK
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "gen":
            cmd_gen(cfg, args.out, _workers(args.workers))
        elif args.command == "run":
            cmd_run(cfg, args.data, args.out, _workers(args.workers), args.matched_budget)
        else:
            cmd_eval(cfg, args.data, args.run, args.out)
    except (ConfigError, GeometryError) as exc:
        print(f"dipolefilter: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except io.DataError as exc:
        print(f"dipolefilter: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalCollapse, TikhonovError) as exc:
        print(f"dipolefilter: numerical collapse: {exc}", file=sys.stderr)
        return EXIT_COLLAPSE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
