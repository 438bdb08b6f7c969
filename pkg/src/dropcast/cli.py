"""``dropcast`` command line: simulate, train, forecast, evaluate, scorecard, ablate.

Every command writes below ``<output_root>/<run_id>/`` and records the fully
resolved configuration next to its outputs. Exit codes: 0 success, 2 bad
configuration, 3 numeric failure, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from . import report
from .backbone import build
from .config import ConfigError, RunConfig
from .curriculum import (Checkpoint, ToyDataset, TrainingDiverged, load_checkpoint, save_checkpoint,
                         train_deep_ensemble, train_stage1, train_stage2, validation_positions)
from .rollout import read_archive, roll_forward, write_archive
from .toyatmos import Trajectory, load_trajectory, save_trajectory, simulate
from .verification import (evaluate, forecast_spectra, read_metrics_csv, relative_skill, write_metrics_csv,
                           write_metrics_json, write_skill_csv, write_spectrum_csv)
from .grid import central_band

logger = logging.getLogger("dropcast")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4

ABLATION_CELLS = ("dropout_05", "dropout_10", "dropout_15", "adaln", "m4", "scratch", "adamw")


class MissingArtifact(FileNotFoundError):
    def __init__(self, what: str, path, producer: str):
        super().__init__(f"missing {what} at {path}; create it with `dropcast {producer}`")


# --- helpers ------------------------------------------------------------------------


def _claim(path: Path, force: bool) -> Path:
    """Refuse to reuse an existing output directory unless forced."""
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"{path} already exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(directory: Path, command: str, cfg: RunConfig, extra: dict | None = None):
    cfgmod.save(cfg, directory / "resolved_config.toml")
    payload = {"command": command, "config": cfg.to_dict(), **(extra or {})}
    (directory / "command_manifest.json").write_text(json.dumps(payload, indent=2))


def _load_data(cfg: RunConfig) -> tuple[Trajectory, ToyDataset]:
    data_dir = cfg.run_dir / "data"
    if not (data_dir / "manifest.json").exists():
        raise MissingArtifact("simulated trajectory", data_dir, "simulate")
    traj, manifest = load_trajectory(data_dir)
    return traj, ToyDataset.from_trajectory(traj, cfg.forcing())


def _ckpt_dirs(cfg: RunConfig, kind: str) -> list[Path]:
    root = cfg.run_dir / "checkpoints"
    if kind == "stage1":
        dirs = [root / "stage1"]
    elif kind == "scratch":
        dirs = [root / "scratch"]
    else:
        dirs = [root / f"stage2_seed{s}" for s in cfg.seeds[:cfg.deep_ensemble_size]]
    for d in dirs:
        if not (d / "manifest.json").exists():
            raise MissingArtifact(f"{kind} checkpoint", d, "train")
    return dirs


def _forecast_inits(ds: ToyDataset, cfg: RunConfig) -> list[int]:
    windows = getattr(ds, cfg.forecast_split)
    pos = validation_positions(windows, cfg.n_forecast_inits, cfg.forecast_steps)
    return [int(p) for p in pos]


# --- commands -----------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, force: bool = False) -> Path:
    out = _claim(cfg.run_dir / "data", force)
    traj = simulate(cfg.grid(), cfg.dynamics(), cfg.n_steps)
    save_trajectory(traj, out, forcing=cfg.forcing())
    _write_manifest(out, "simulate", cfg)
    logger.info("simulated %d states on %s grid -> %s", len(traj), cfg.grid().shape, out)
    return out


def _train_all(cfg: RunConfig, ds: ToyDataset, out: Path, parallel: int = 1) -> dict[str, Checkpoint]:
    plan = cfg.plan()
    torch.manual_seed(cfg.model_seed)
    model = build(cfg.model_config(), ds.grid, seed=cfg.model_seed)
    ck1 = train_stage1(plan, model, ds)
    save_checkpoint(ck1, out / "stage1")
    runs = {"stage1": ck1}
    if cfg.run_stage2 and plan.stage2_epochs > 0:
        for seed, ck in zip(plan.seeds, train_deep_ensemble(plan, ck1, ds, parallel=parallel)):
            save_checkpoint(ck, out / f"stage2_seed{seed}")
            runs[f"stage2_seed{seed}"] = ck
    if cfg.run_scratch:
        budget = plan.stage_steps("stage1", len(ds.train)) + plan.stage_steps("stage2", len(ds.train))
        ck = train_stage2(replace(plan, from_scratch_crps=True), None, ds, model_config=cfg.model_config(),
                          n_steps=budget)
        save_checkpoint(ck, out / "scratch")
        runs["scratch"] = ck
    return runs


def cmd_train(cfg: RunConfig, force: bool = False, parallel: int = 1) -> Path:
    _, ds = _load_data(cfg)
    out = _claim(cfg.run_dir / "checkpoints", force)
    runs = _train_all(cfg, ds, out, parallel)
    curves, baseline = report.curves_from_checkpoints({k: v for k, v in runs.items() if k != "stage1"} or runs)
    report.render_training_curves(curves, out / "training_curves.png", baseline)
    _write_manifest(out, "train", cfg, {"checkpoints": sorted(runs)})
    return out


def _forecast(cfg: RunConfig, ds: ToyDataset, ckpts: list[Checkpoint], out: Path) -> list[Path]:
    windows = getattr(ds, cfg.forecast_split)
    paths = []
    for p in _forecast_inits(ds, cfg):
        w = windows[p]
        fc = roll_forward(ckpts, w, cfg.forecast_steps, cfg.members_per_ckpt, seed=cfg.forecast_seed,
                          stochastic=cfg.stochastic_mode != "deterministic", mask_schedule=cfg.mask_schedule,
                          use_ema=cfg.use_ema)
        if fc.truncated:
            logger.warning("init %d: %d member(s) truncated by non-finite states", w.time_index, len(fc.truncated))
        path = out / f"init_{w.time_index:06d}"
        write_archive(fc, path)
        paths.append(path)
    return paths


def cmd_forecast(cfg: RunConfig, force: bool = False) -> Path:
    _, ds = _load_data(cfg)
    ckpts = [load_checkpoint(d) for d in _ckpt_dirs(cfg, cfg.forecast_checkpoints)]
    out = _claim(cfg.run_dir / "forecasts", force)
    paths = _forecast(cfg, ds, ckpts, out)
    _write_manifest(out, "forecast", cfg, {"archives": [p.name for p in paths]})
    return out


def _evaluate(cfg: RunConfig, traj: Trajectory, archives: list[Path], out: Path):
    forecasts = [read_archive(p) for p in archives]
    records = evaluate(forecasts, traj)
    write_metrics_csv(records, out / "metrics.csv")
    write_metrics_json(records, out / "metrics.json", {"n_archives": len(archives)})
    band = central_band(cfg.grid(), cfg.spectrum_band_fraction)
    lead = forecasts[0].lead_steps[-1]
    spectra = forecast_spectra(forecasts[0], band, leads=[lead])
    for rec in spectra:
        write_spectrum_csv(rec, out / "spectra" / f"{rec.variable}_lead{rec.lead}.csv")
    report.render_spectra(spectra, out / "spectra" / "spectra.png")
    return records


def cmd_evaluate(cfg: RunConfig, force: bool = False, archive_dir: str | None = None) -> Path:
    traj, _ = _load_data(cfg)
    src = Path(archive_dir) if archive_dir else cfg.run_dir / "forecasts"
    archives = sorted(p for p in src.glob("init_*") if p.is_dir()) if src.exists() else []
    if not archives:
        raise MissingArtifact("forecast archives", src, "forecast")
    out = _claim(cfg.run_dir / "metrics", force)
    _evaluate(cfg, traj, archives, out)
    _write_manifest(out, "evaluate", cfg, {"archives": [str(p) for p in archives]})
    return out


def cmd_scorecard(cfg: RunConfig, model_csv: str | None, reference_csv: str, metric: str = "crps",
                  force: bool = False) -> Path:
    model_csv = Path(model_csv) if model_csv else cfg.run_dir / "metrics" / "metrics.csv"
    for p, what in ((model_csv, "model metrics"), (Path(reference_csv), "reference metrics")):
        if not p.exists():
            raise MissingArtifact(what, p, "evaluate")
    table = relative_skill(read_metrics_csv(model_csv), read_metrics_csv(reference_csv), metric)
    out = _claim(cfg.run_dir / "scorecard", force)
    report.render_scorecard(table, out / f"scorecard_{metric}.png")
    report.render_skill_vs_lead(table, out / f"skill_vs_lead_{metric}.png")
    _write_manifest(out, "scorecard", cfg, {"model": str(model_csv), "reference": str(reference_csv),
                                            "aggregate_percent": table.aggregate})
    logger.info("aggregate relative %s: %+.2f%%", metric, table.aggregate)
    return out


def _ablation_cell(args) -> dict:
    cfg, cell, stage1_dir, out = args
    traj, ds = _load_data(cfg)
    ck1 = load_checkpoint(stage1_dir)
    plan = cfg.plan()
    ccfg = cfg
    if cell.startswith("dropout_"):
        ccfg = cfg.replace(dropout_rate=int(cell.split("_")[1]) / 100)
        ck = train_stage2(plan, ck1, ds, dropout_rate=ccfg.dropout_rate)
    elif cell == "adaln":
        ccfg = cfg.replace(stochastic_mode="adaln_noise")
        ck = train_stage2(plan, ck1, ds, model_config=ccfg.model_config())
    elif cell == "m4":
        ck = train_stage2(replace(plan, train_ensemble_size=4), ck1, ds)
    elif cell == "scratch":
        budget = plan.stage_steps("stage1", len(ds.train)) + plan.stage_steps("stage2", len(ds.train))
        ck = train_stage2(replace(plan, from_scratch_crps=True), None, ds, model_config=cfg.model_config(),
                          n_steps=budget)
    elif cell == "adamw":
        ccfg = cfg.replace(stage1_use_muon=False, stage2_use_muon=False, stage2_adamw_peak_lr=1e-4)
        p = ccfg.plan()
        ck0 = train_stage1(p, build(ccfg.model_config(), ds.grid, seed=cfg.model_seed), ds)
        ck = train_stage2(p, ck0, ds)
    else:
        raise ConfigError(f"unknown ablation cell {cell!r}; choose from {ABLATION_CELLS}")
    cell_dir = out / cell
    save_checkpoint(ck, cell_dir / "checkpoint")
    archives = _forecast(ccfg, ds, [ck], cell_dir / "forecasts")
    records = _evaluate(ccfg, traj, archives, cell_dir)
    return {"cell": cell, "crps": float(np.mean([r.crps for r in records])),
            "val_crps_l1": ck.history[-1].get("val_crps_l1")}


def cmd_ablate(cfg: RunConfig, cells=ABLATION_CELLS, force: bool = False, parallel: int = 1) -> Path:
    _load_data(cfg)
    stage1_dir = _ckpt_dirs(cfg, "stage1")[0]
    out = _claim(cfg.run_dir / "ablate", force)
    jobs = [(cfg, c, stage1_dir, out) for c in cells]
    if parallel > 1 and len(jobs) > 1:
        import concurrent.futures as cf
        import multiprocessing as mp

        with cf.ProcessPoolExecutor(max_workers=parallel, mp_context=mp.get_context("spawn")) as pool:
            results = list(pool.map(_ablation_cell, jobs))
    else:
        results = [_ablation_cell(j) for j in jobs]
    summary = {r["cell"]: r for r in results}
    ref = summary.get("dropout_10")
    if ref is not None:
        for r in results:
            r["relative_to_dropout_10_percent"] = 100 * (r["crps"] - ref["crps"]) / ref["crps"]
        base = read_metrics_csv(out / "dropout_10" / "metrics.csv")
        for r in results:
            if r["cell"] != "dropout_10":
                table = relative_skill(read_metrics_csv(out / r["cell"] / "metrics.csv"), base)
                write_skill_csv(table, out / r["cell"] / "relative_crps.csv")
                report.render_scorecard(table, out / r["cell"] / "scorecard.png",
                                        title=f"{r['cell']} vs dropout 10%: CRPS (%)")
    drop = [summary[c] for c in ("dropout_05", "dropout_10", "dropout_15") if c in summary]
    pairwise = {f"{a['cell']}:{b['cell']}": 100 * (a["crps"] - b["crps"]) / b["crps"]
                for i, a in enumerate(drop) for b in drop[i + 1:]}
    (out / "summary.json").write_text(json.dumps({"cells": results, "dropout_pairwise_percent": pairwise}, indent=2))
    _write_manifest(out, "ablate", cfg, {"cells": list(cells)})
    return out


# --- argument parsing ---------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dropcast", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-c", "--config", help="flat TOML run config (defaults apply to missing keys)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable; values are TOML literals")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs of this command")
        return sp

    common(sub.add_parser("simulate", help="generate and store a toy-planet trajectory"))
    sp = common(sub.add_parser("train", help="Stage 1, then Stage 2 / K-seed ensemble / from-scratch ablation"))
    sp.add_argument("--parallel", type=int, default=1, help="processes for the K Stage-2 runs")
    common(sub.add_parser("forecast", help="roll out ensemble forecasts from trained checkpoints"))
    sp = common(sub.add_parser("evaluate", help="metrics and spectra of forecast archives against truth"))
    sp.add_argument("--archives", help="directory of forecast archives (default: the run's forecasts/)")
    sp = common(sub.add_parser("scorecard", help="relative-skill scorecard between two metric tables"))
    sp.add_argument("--model", help="model metrics.csv (default: this run's metrics)")
    sp.add_argument("--reference", required=True, help="reference metrics.csv")
    sp.add_argument("--metric", default="crps", choices=("crps", "rmse", "spread", "ssr"))
    sp = common(sub.add_parser("ablate", help="dropout-rate, adaLN, M=4, from-scratch and AdamW-only cells"))
    sp.add_argument("--cells", nargs="+", default=list(ABLATION_CELLS), choices=ABLATION_CELLS)
    sp.add_argument("--parallel", type=int, default=1, help="processes for ablation cells")
    sub.add_parser("config", help="print the documented default config as TOML")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "config":
            sys.stdout.write(cfgmod.dumps(RunConfig()))
            return EXIT_OK
        cfg = cfgmod.load(args.config, args.set)
        if args.command == "simulate":
            cmd_simulate(cfg, args.force)
        elif args.command == "train":
            cmd_train(cfg, args.force, args.parallel)
        elif args.command == "forecast":
            cmd_forecast(cfg, args.force)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.force, args.archives)
        elif args.command == "scorecard":
            cmd_scorecard(cfg, args.model, args.reference, args.metric, args.force)
        elif args.command == "ablate":
            cmd_ablate(cfg, tuple(args.cells), args.force, args.parallel)
    except ConfigError as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError) as e:
        logger.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except FileNotFoundError as e:
        logger.error("%s", e)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
