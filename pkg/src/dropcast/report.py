"""Static figures (scorecards, skill-vs-lead lines, spectra, training curves), each with a CSV sidecar.

The CSV is the source of truth: every ``render_*`` function has a matching
reader so a figure can be regenerated from its sidecar alone.
"""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Patch, Rectangle  # noqa: E402

from .verification import SkillTable, SpectrumRecord  # noqa: E402

logger = logging.getLogger(__name__)

CMAP = "RdBu_r"
_PNG_META = {"Software": None}  # keep files byte-stable across matplotlib builds


def _sidecar(path) -> Path:
    return Path(path).with_suffix(".csv")


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META if path.suffix == ".png" else None)
    plt.close(fig)


# --- scorecards ---------------------------------------------------------------------


def scorecard_bounds(table: SkillTable) -> float:
    vals = np.abs(table.as_array())
    vals = vals[np.isfinite(vals)]
    vmax = float(vals.max()) if vals.size else 0.0
    return vmax if vmax > 0 else 1.0


def write_scorecard_csv(table: SkillTable, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "variable", "lead", "percent"])
        for v in table.variables:
            for l in table.leads:
                w.writerow([table.metric, v, l, repr(table.cells.get((v, l), math.nan))])


def read_scorecard_csv(path) -> SkillTable:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty scorecard table {path}")
    variables = list(dict.fromkeys(r["variable"] for r in rows))
    leads = sorted({int(r["lead"]) for r in rows})
    cells = {(r["variable"], int(r["lead"])): float(r["percent"]) for r in rows}
    return SkillTable(rows[0]["metric"], variables, leads, cells)


def render_scorecard(table: SkillTable, path, title: str | None = None) -> tuple[Path, Path]:
    """Variables x leads grid of signed percentages; blue is better (lower), NaN cells hatched."""
    if not table.cells or not table.variables or not table.leads:
        raise ValueError("cannot render an empty scorecard")
    data = table.as_array()
    vmax = scorecard_bounds(table)
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(table.leads), 0.8 + 0.45 * len(table.variables)))
    im = ax.imshow(np.ma.masked_invalid(data), cmap=CMAP, vmin=-vmax, vmax=vmax, aspect="auto")
    has_nan = False
    for i in range(data.shape[0]):
        for j in range(data.shape[1]):
            v = data[i, j]
            if np.isnan(v):
                has_nan = True
                ax.add_patch(Rectangle((j - 0.5, i - 0.5), 1, 1, fill=False, hatch="///", edgecolor="0.5"))
            else:
                ax.text(j, i, f"{v:.1f}", ha="center", va="center", fontsize=8)
    ax.set_xticks(range(len(table.leads)), [str(l) for l in table.leads])
    ax.set_yticks(range(len(table.variables)), table.variables)
    ax.set_xlabel("lead (steps)")
    ax.set_title(title or f"relative {table.metric} (%)")
    fig.colorbar(im, ax=ax, label="%")
    if has_nan:
        ax.legend(handles=[Patch(fill=False, hatch="///", edgecolor="0.5", label="no data")],
                  loc="upper left", bbox_to_anchor=(1.25, 1.0), fontsize=7)
    fig.tight_layout()
    _save(fig, path)
    write_scorecard_csv(table, _sidecar(path))
    return Path(path), _sidecar(path)


def render_skill_vs_lead(table: SkillTable, path) -> tuple[Path, Path]:
    """One line per variable: relative skill against lead."""
    if not table.cells:
        raise ValueError("cannot render an empty skill table")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    data = table.as_array()
    for i, v in enumerate(table.variables):
        ax.plot(table.leads, data[i], marker="o", label=v)
    ax.axhline(0, color="k", lw=0.8)
    ax.set_xlabel("lead (steps)")
    ax.set_ylabel(f"relative {table.metric} (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
    write_scorecard_csv(table, _sidecar(path))
    return Path(path), _sidecar(path)


# --- spectra ------------------------------------------------------------------------


def render_spectra(records: list[SpectrumRecord], path) -> tuple[Path, Path] | None:
    if not records:
        logger.warning("render_spectra: no spectra, nothing written")
        return None
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in records:
        k = np.asarray(r.wavenumbers)[1:]
        ax.loglog(k, np.maximum(np.asarray(r.power)[1:], 1e-30), label=f"{r.variable} lead {r.lead}")
    ax.set_xlabel("zonal wavenumber")
    ax.set_ylabel("power")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
    with _sidecar(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "lead", "lat_lo", "lat_hi", "wavenumber", "power"])
        for r in records:
            for k, p in zip(r.wavenumbers, r.power):
                w.writerow([r.variable, r.lead, r.lat_band[0], r.lat_band[1], int(k), repr(float(p))])
    return Path(path), _sidecar(path)


# --- training curves ----------------------------------------------------------------


def curves_from_checkpoints(checkpoints: dict, metric: str = "val_crps_l1") -> tuple[dict, float | None]:
    """Per-run (step, value) series from checkpoint histories, plus the Stage-1 baseline level.

    Stage-2 steps are counted from the start of probabilistic training.
    """
    runs, baseline = {}, None
    for name, ck in checkpoints.items():
        offset = ck.manifest.get("step_offset", 0)
        pts = []
        for h in ck.history:
            if metric not in h:
                continue
            if h.get("stage") == "stage1":
                if h.get("baseline"):
                    baseline = h[metric]
                continue
            pts.append((h["step"] - offset, h[metric]))
        runs[name] = pts
    return runs, baseline


def render_training_curves(runs: dict, path, baseline: float | None = None, metric: str = "val_crps_l1"):
    """Overlaid validation curves with an optional dashed deterministic-baseline level."""
    runs = {k: list(v) for k, v in runs.items() if len(v)}
    if not runs:
        logger.warning("render_training_curves: empty history, nothing written")
        return None
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for name, pts in runs.items():
        s, v = zip(*pts)
        ax.plot(s, v, label=name)
    if baseline is not None:
        ax.axhline(baseline, ls="--", color="tab:blue", label="stage-1 baseline")
    ax.set_xlabel("probabilistic training step")
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
    with _sidecar(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "step", "value"])
        for name, pts in runs.items():
            for s, v in pts:
                w.writerow([name, int(s), repr(float(v))])
        if baseline is not None:
            w.writerow(["__baseline__", "", repr(float(baseline))])
    return Path(path), _sidecar(path)


def read_training_curves_csv(path) -> tuple[dict, float | None]:
    runs, baseline = {}, None
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            if r["run"] == "__baseline__":
                baseline = float(r["value"])
            else:
                runs.setdefault(r["run"], []).append((int(r["step"]), float(r["value"])))
    return runs, baseline
