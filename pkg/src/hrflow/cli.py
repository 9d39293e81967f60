"""Command-line harness: ``hrf train|sample|eval|density|velocity-check|ablate``.

Every command reads a YAML experiment config, writes CSV/JSON artifacts into
the output directory and refreshes ``manifest.json`` there.  Exit codes: 0
success, 2 configuration or argument error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .density import (SolverConfig, density_alg3, density_alg4, LikelihoodReport, bits_per_dim,
                      write_report_csv)
from .distributions import VelocityLaw
from .errors import ConfigError, NumericalError, UndefinedRegionError, UnsupportedDensityError
from .metrics import distance
from .model import HrfModel
from .sampler import SamplerSchedule, read_samples_csv, sample_batch, write_samples_csv, write_trajectories_csv
from .training import train, write_loss_csv
from .velocity_check import check_point, write_curves_csv, write_l1_csv

log = logging.getLogger("hrflow")

# stream tags so each command draws from its own reproducible RNG stream
_SAMPLE, _EVAL, _DENSITY, _VCHECK, _ABLATE = 1, 2, 3, 4, 5


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg, seed: int, started: float, extra: dict | None = None) -> Path:
    """List every file under ``out`` (the manifest itself included, without a hash)."""
    path = out / "manifest.json"
    files = sorted(p for p in out.rglob("*") if p.is_file() and p != path)
    artifacts = [{"path": p.relative_to(out).as_posix(), "bytes": p.stat().st_size, "sha256": _sha256(p)}
                 for p in files]
    artifacts.append({"path": "manifest.json", "bytes": None, "sha256": None})
    artifacts.sort(key=lambda a: a["path"])
    doc = {
        "command": command,
        "config_hash": cfg.hash(),
        "code_version": code_version(),
        "seed": seed,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "artifacts": artifacts,
    }
    doc.update(extra or {})
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _load_dataset(cfg):
    if cfg.dataset_path is None:
        return None
    return read_samples_csv(cfg.dataset_path)


def _reference(cfg, n: int, rng):
    if cfg.target is not None:
        return cfg.target.sample(n, rng)
    data = _load_dataset(cfg)
    return data[rng.permutation(len(data))[:n]]


def _checkpoint(args, out: Path) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.json"
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found; run `hrf train` first or pass --checkpoint")
    return path


# --------------------------------------------------------------------------
# commands

def cmd_train(cfg, seed: int, out: Path, args=None) -> dict:
    tc = cfg.train_config(seed=seed, dataset=_load_dataset(cfg))
    model, losses = train(tc)
    model.save(out / "checkpoint.json", {"name": cfg.name, "seed": seed, "config_hash": cfg.hash()})
    write_loss_csv(out / "losses.csv", losses, tc.log_every)
    return {"final_loss": float(losses[-1])}


def cmd_sample(cfg, seed: int, out: Path, args) -> dict:
    model, _ = HrfModel.load(_checkpoint(args, out))
    schedule = SamplerSchedule.parse(args.schedule or cfg.sample.schedule)
    n = args.n or cfg.sample.n
    record = cfg.sample.record_trajectories or args.record
    points, traj = sample_batch(model, schedule, n, _rng(seed, _SAMPLE), record_trajectories=record,
                                redraw_inner=cfg.sample.redraw_inner)
    write_samples_csv(out / "samples.csv", points)
    if traj is not None:
        write_trajectories_csv(out / "trajectories.csv", traj)
    return {"nfe": schedule.nfe, "schedule": str(schedule), "n_samples": n}


def cmd_eval(cfg, seed: int, out: Path, args) -> dict:
    path = Path(args.samples) if args.samples else out / "samples.csv"
    if not path.exists():
        raise ConfigError(f"samples file {path} not found")
    samples = read_samples_csv(path)
    ref = _reference(cfg, cfg.eval.n_reference, _rng(seed, _EVAL))
    report = distance(samples, ref, cfg.eval.metric, cfg.eval.n_proj, seed)
    _write_rows(out / "metrics.csv", ["metric", "value", "n_samples", "n_reference", "n_projections", "seed"],
                [[report.metric, repr(report.value), report.n_samples, len(ref),
                  "" if report.n_projections is None else report.n_projections, seed]])
    return {"metric": report.metric, "value": report.value}


def run_density(model, cfg, points, rng) -> LikelihoodReport:
    d = cfg.density
    solver = SolverConfig(d.atol, d.rtol, d.max_steps)
    kw = dict(trace=d.trace, n_probes=d.n_probes, probe_law=d.probe_law)
    if d.estimator == "alg3":
        z0 = np.zeros(model.space_dim) if d.pin_z0 else None
        return density_alg3(model, points, rng, n_avg=d.n_avg, z0=z0, cfg=solver, **kw)
    reports = [density_alg4(model, points, rng, n_rho=d.n_rho, t=d.t, cfg=solver, **kw)
               for _ in range(d.n_t_draws)]
    if len(reports) == 1:
        return reports[0]
    from scipy.special import logsumexp
    stacked = np.stack([r.log_density for r in reports])
    logp = logsumexp(stacked, axis=0) - np.log(len(reports))
    return LikelihoodReport(reports[0].points, logp, bits_per_dim(logp, model.space_dim), "alg4-t",
                            d.n_rho, np.full(len(logp), np.nan), d.n_probes)


def cmd_density(cfg, seed: int, out: Path, args) -> dict:
    model, _ = HrfModel.load(_checkpoint(args, out))
    if model.depth != 2:
        raise ConfigError(f"density estimation needs a depth-2 checkpoint, got depth {model.depth}")
    d = cfg.density
    rng = _rng(seed, _DENSITY)
    if d.points_path:
        points = read_samples_csv(d.points_path)
    else:
        points = _reference(cfg, d.n_points, rng)
    if points.shape[1] != model.space_dim:
        raise ConfigError(f"points have dimension {points.shape[1]}, model has {model.space_dim}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = run_density(model, cfg, points, rng)
    for w in caught:
        log.warning("%s", w.message)
        print(f"warning: {w.message}", file=sys.stderr)
    write_report_csv(out / "density.csv", report)
    _write_rows(out / "density_summary.csv", ["estimator", "n_points", "mean_log_density", "mean_bpd"],
                [[report.estimator, len(points), repr(float(np.mean(report.log_density))), repr(report.mean_bpd)]])
    return {"mean_bpd": report.mean_bpd, "warnings": [str(w.message) for w in caught]}


def cmd_velocity_check(cfg, seed: int, out: Path, args=None) -> dict:
    if cfg.target is None:
        raise ConfigError("velocity-check needs an analytic target")
    try:
        law = VelocityLaw(cfg.source, cfg.target)
    except UnsupportedDensityError as exc:
        raise ConfigError(f"velocity-check needs a Gaussian to Gaussian-mixture fixture: {exc}") from None
    v = cfg.velocity_check
    rng = _rng(seed, _VCHECK)
    checks = [check_point(law, x, t, v.n_samples, rng, v.window, (v.v_min, v.v_max), v.bins) for x, t in v.points]
    write_curves_csv(out / "velocity_curves.csv", checks)
    write_l1_csv(out / "velocity_l1.csv", checks)
    return {"l1": [None if c.status != "ok" else c.l1 for c in checks]}


def _ablate_one(job):
    """Train one model and evaluate every schedule; runs in its own subdirectory."""
    cfg_dict, seed, model_idx, run_dir = job
    cfg = cfgmod.from_dict(cfg_dict)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    model_seed = seed + model_idx
    model, losses = train(cfg.train_config(seed=model_seed, dataset=_load_dataset(cfg)))
    model.save(run_dir / "checkpoint.json", {"name": cfg.name, "seed": model_seed, "config_hash": cfg.hash()})
    write_loss_csv(run_dir / "losses.csv", losses, cfg.train.log_every)
    a = cfg.ablate
    rows = []
    for rep in range(a.n_eval_repeats):
        ref = _reference(cfg, a.n_eval, _rng(seed, _ABLATE, 0, rep))
        for k, text in enumerate(a.schedules):
            schedule = SamplerSchedule.parse(text)
            z, _ = sample_batch(model, schedule, a.n_eval, _rng(model_seed, _ABLATE, 1, rep, k),
                                redraw_inner=cfg.sample.redraw_inner)
            rep_metric = distance(z, ref, cfg.eval.metric, cfg.eval.n_proj, seed)
            rows.append([model_idx, model_seed, rep, str(schedule), schedule.nfe, rep_metric.metric,
                         repr(rep_metric.value)])
    _write_rows(run_dir / "evals.csv", ["model", "model_seed", "repeat", "schedule", "nfe", "metric", "value"], rows)
    return rows


def ablation_table(rows, schedules, n_models: int, n_eval_repeats: int):
    """Mean and std over models of the per-model mean over eval repeats."""
    table = []
    for text in schedules:
        s = str(SamplerSchedule.parse(text))
        per_model = {}
        metric = None
        for model_idx, _, _, sched, _, metric_name, value in rows:
            if sched == s:
                per_model.setdefault(model_idx, []).append(float(value))
                metric = metric_name
        means = np.array([np.mean(per_model[m]) for m in sorted(per_model)])
        std = None if len(means) < 2 else float(np.std(means, ddof=1))
        table.append([s, SamplerSchedule.parse(s).nfe, metric, float(np.mean(means)), std, n_models, n_eval_repeats])
    return table


def cmd_ablate(cfg, seed: int, out: Path, args) -> dict:
    a = cfg.ablate
    a.check_budget()
    if cfg.train.depth != SamplerSchedule.parse(a.schedules[0]).depth:
        raise ConfigError("ablation schedules must match the training depth")
    jobs = [(cfg.to_dict(), seed, m, str(out / f"run_{m}")) for m in range(a.n_models)]
    workers = max(1, getattr(args, "jobs", 1) or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablate_one, jobs))
    else:
        results = [_ablate_one(j) for j in jobs]
    rows = [r for res in results for r in res]
    table = ablation_table(rows, a.schedules, a.n_models, a.n_eval_repeats)
    _write_rows(out / "ablation.csv", ["schedule", "nfe", "metric", "mean", "std", "n_models", "n_eval_repeats"],
                [[s, nfe, m, repr(mean), _fmt(std), nm, ne] for s, nfe, m, mean, std, nm, ne in table])
    return {"nfe": a.nfe}


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "density": cmd_density,
    "velocity-check": cmd_velocity_check,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hrf", description="Hierarchical rectified flow experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="YAML experiment config")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--out", default=None, help="output directory (default: config 'out')")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("sample", "density"):
            s.add_argument("--checkpoint", default=None, help="default: <out>/checkpoint.json")
        if name == "sample":
            s.add_argument("--schedule", default=None, help="per-level step counts, e.g. 5,20")
            s.add_argument("--n", type=int, default=None)
            s.add_argument("--record", action="store_true", help="also write trajectories.csv")
        if name == "eval":
            s.add_argument("--samples", default=None, help="default: <out>/samples.csv")
        if name == "ablate":
            s.add_argument("--jobs", type=int, default=1, help="models trained concurrently")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cfg = cfgmod.load(args.config)
        seed = cfg.seed if args.seed is None else args.seed
        out = Path(args.out or cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(cfg.dumps())
        extra = COMMANDS[args.command](cfg, seed, out, args)
        write_manifest(out, args.command, cfg, seed, started, extra)
    except (ConfigError, UndefinedRegionError, UnsupportedDensityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
