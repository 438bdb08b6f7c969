"""Ensemble verification: fair CRPS, ensemble-mean RMSE, spread, SSR, zonal spectra.

Scores are computed per (variable, lead) cell in whatever units the forecast
carries (archives are physical by default). Squared-error metrics are
averaged over initializations before the square root, as WeatherBench does.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np
import torch

from .grid import GridSpec, area_weights, band_rows, central_band
from .objectives import fair_crps

METRIC_COLUMNS = ("variable", "lead", "crps", "rmse", "spread", "ssr", "n_members", "n_inits")
METRIC_METADATA = {
    "variance_divisor": "M-1",
    "ssr_correction": "sqrt((M+1)/M) * Spread / RMSE",
    "aggregation": "mean over inits of area-weighted spatial means; RMSE/Spread take the root afterwards",
    "crps_estimator": "fair (spread divisor M(M-1))",
}


@dataclass
class MetricRecord:
    variable: str
    lead: int
    crps: float = math.nan
    rmse: float = math.nan
    spread: float = math.nan
    ssr: float = math.nan
    n_members: int = 0
    n_inits: int = 0


@dataclass
class SpectrumRecord:
    variable: str
    lead: int
    wavenumbers: np.ndarray
    power: np.ndarray
    lat_band: tuple[float, float]


@dataclass
class SkillTable:
    """Relative skill in percent, keyed by (variable, lead)."""

    metric: str
    variables: list[str]
    leads: list[int]
    cells: dict[tuple[str, int], float] = field(default_factory=dict)

    @property
    def aggregate(self) -> float:
        vals = [v for v in self.cells.values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def as_array(self) -> np.ndarray:
        return np.array([[self.cells.get((v, l), math.nan) for l in self.leads] for v in self.variables])


# --- alignment ----------------------------------------------------------------------


def _truth_lookup(truth) -> dict[int, np.ndarray]:
    if isinstance(truth, dict):
        return {int(k): np.asarray(v) for k, v in truth.items()}
    return {int(s.time_index): np.asarray(s.values) for s in truth}


def _aligned(forecasts, truth) -> tuple[list, np.ndarray, np.ndarray]:
    """Stack members (I, M, L, C, H, W) and truth (I, L, C, H, W) over inits."""
    if not isinstance(forecasts, (list, tuple)):
        forecasts = [forecasts]
    if not forecasts:
        raise ValueError("no forecasts to verify")
    lookup = _truth_lookup(truth)
    leads = list(forecasts[0].lead_steps)
    members, targets = [], []
    for fc in forecasts:
        if list(fc.lead_steps) != leads:
            raise ValueError("forecasts disagree on lead steps")
        ys = []
        for lead in leads:
            t = fc.init_time + lead
            if t not in lookup:
                raise ValueError(f"truth has no state at time {t} (init {fc.init_time}, lead {lead})")
            ys.append(lookup[t])
        y = np.stack(ys)
        if y.shape != fc.members.shape[1:]:
            raise ValueError(f"truth shape {y.shape} does not match forecast lead block {fc.members.shape[1:]}")
        members.append(fc.members)
        targets.append(y)
    return leads, np.stack(members).astype(np.float64), np.stack(targets).astype(np.float64)


def _names(forecasts, n_channels: int) -> list[str]:
    fc = forecasts[0] if isinstance(forecasts, (list, tuple)) else forecasts
    names = list(fc.channel_names)
    return names if len(names) == n_channels else [f"var{c}" for c in range(n_channels)]


def _weights(weights, grid: GridSpec | None, n_lat: int) -> np.ndarray:
    if weights is None:
        if grid is None:
            raise ValueError("need area weights or a grid")
        weights = area_weights(grid)
    a = np.asarray(getattr(weights, "normalized", weights), dtype=np.float64)
    if a.shape != (n_lat,):
        raise ValueError(f"{a.shape[0]} area weights for {n_lat} latitude rows")
    return a


# --- metrics ------------------------------------------------------------------------


def eval_crps(forecasts, truth, weights=None) -> list[MetricRecord]:
    """Fair CRPS per (variable, lead), averaged over initializations."""
    leads, X, Y = _aligned(forecasts, truth)
    I, M, L, C = X.shape[:4]
    if M < 2:
        raise ValueError(f"CRPS needs at least 2 members, got {M}")
    a = _weights(weights, getattr(forecasts if not isinstance(forecasts, (list, tuple)) else forecasts[0], "grid", None),
                 X.shape[-2])
    names = _names(forecasts, C)
    records = []
    for li, lead in enumerate(leads):
        # (M, I, C, H, W) vs (I, C, H, W): objectives averages the init axis
        members = torch.from_numpy(np.ascontiguousarray(X[:, :, li].swapaxes(0, 1)))
        per = fair_crps(members, torch.from_numpy(Y[:, li]), a).per_channel.numpy()
        for c in range(C):
            records.append(MetricRecord(names[c], lead, crps=float(per[c]), n_members=M, n_inits=I))
    return records


def eval_rmse_spread_ssr(forecasts, truth, weights=None) -> list[MetricRecord]:
    """Ensemble-mean RMSE, spread (variance divisor M-1) and corrected SSR.

    A cell with RMSE 0 and positive spread reports SSR = inf.
    """
    leads, X, Y = _aligned(forecasts, truth)
    I, M, L, C = X.shape[:4]
    if M < 2:
        raise ValueError(f"spread needs at least 2 members, got {M}")
    a = _weights(weights, getattr(forecasts if not isinstance(forecasts, (list, tuple)) else forecasts[0], "grid", None),
                 X.shape[-2])[:, None]
    names = _names(forecasts, C)
    mean = X.mean(axis=1)
    var = X.var(axis=1, ddof=1)
    mse = ((mean - Y) ** 2 * a).mean(axis=(-2, -1)).mean(axis=0)      # (L, C)
    ens_var = (var * a).mean(axis=(-2, -1)).mean(axis=0)
    rmse, spread = np.sqrt(mse), np.sqrt(ens_var)
    corr = math.sqrt((M + 1) / M)
    records = []
    for li, lead in enumerate(leads):
        for c in range(C):
            r, s = float(rmse[li, c]), float(spread[li, c])
            if r > 0:
                ssr = corr * s / r
            else:
                ssr = math.inf if s > 0 else math.nan
            records.append(MetricRecord(names[c], lead, rmse=r, spread=s, ssr=ssr, n_members=M, n_inits=I))
    return records


def evaluate(forecasts, truth, weights=None) -> list[MetricRecord]:
    """Full metric suite, one record per (variable, lead)."""
    crps = {(r.variable, r.lead): r.crps for r in eval_crps(forecasts, truth, weights)}
    out = eval_rmse_spread_ssr(forecasts, truth, weights)
    for r in out:
        r.crps = crps[(r.variable, r.lead)]
    return out


def zonal_spectrum(states, grid: GridSpec, lat_band: tuple[float, float] | None = None, variable: str = "",
                   lead: int = 0) -> SpectrumRecord:
    """One-sided zonal power spectrum, averaged over the rows in ``lat_band`` and all samples.

    ``states`` is anything reshapeable to (..., H, W). Powers sum to the mean
    square of the band (Parseval), so a constant field puts everything at k=0.
    """
    x = np.asarray(getattr(states, "values", states), dtype=np.float64)
    if x.ndim < 2 or x.shape[-2:] != grid.shape:
        raise ValueError(f"states of shape {x.shape} do not end in grid shape {grid.shape}")
    band = central_band(grid) if lat_band is None else tuple(lat_band)
    rows = band_rows(grid, band)
    if len(rows) == 0:
        raise ValueError(f"latitude band {band} contains no grid rows")
    W = grid.n_lon
    f = np.fft.rfft(x[..., rows, :], axis=-1) / W
    p = np.abs(f) ** 2
    p[..., 1:(W + 1) // 2] *= 2          # fold negative frequencies; Nyquist (even W) stays single
    power = p.reshape(-1, p.shape[-1]).mean(axis=0)
    return SpectrumRecord(variable, lead, np.arange(W // 2 + 1), power, (float(band[0]), float(band[1])))


def forecast_spectra(forecast, lat_band=None, leads=None) -> list[SpectrumRecord]:
    """Per (variable, lead) spectra averaged over members."""
    out = []
    leads = forecast.lead_steps if leads is None else leads
    for lead in leads:
        li = forecast.lead_steps.index(lead)
        for c, name in enumerate(_names(forecast, forecast.members.shape[2])):
            out.append(zonal_spectrum(forecast.members[:, li, c], forecast.grid, lat_band, name, lead))
    return out


def relative_skill(model_metrics: Iterable[MetricRecord], reference_metrics: Iterable[MetricRecord],
                   metric: str = "crps") -> SkillTable:
    """100 * (model - reference) / reference per cell, in exact decimal arithmetic."""
    model = {(r.variable, r.lead): getattr(r, metric) for r in model_metrics}
    ref = {(r.variable, r.lead): getattr(r, metric) for r in reference_metrics}
    if set(model) != set(ref):
        missing = sorted(set(model) ^ set(ref))
        raise KeyError(f"model and reference cells differ: {missing[:5]}")
    if not model:
        raise ValueError("no metric cells to compare")
    cells = {}
    for key, m in model.items():
        r = ref[key]
        if r == 0:
            raise ZeroDivisionError(f"reference {metric} is zero at {key}")
        if math.isnan(m) or math.isnan(r):
            cells[key] = math.nan
            continue
        cells[key] = float(Decimal(100) * (Decimal(repr(m)) - Decimal(repr(r))) / Decimal(repr(r)))
    variables = list(dict.fromkeys(k[0] for k in model))
    leads = sorted({k[1] for k in model})
    return SkillTable(metric, variables, leads, cells)


# --- output -------------------------------------------------------------------------


def write_metrics_csv(records: Sequence[MetricRecord], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([r.variable, r.lead] + [repr(float(getattr(r, k))) for k in METRIC_COLUMNS[2:6]]
                       + [r.n_members, r.n_inits])


def read_metrics_csv(path) -> list[MetricRecord]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricRecord(r["variable"], int(r["lead"]), *(float(r[k]) for k in METRIC_COLUMNS[2:6]),
                         int(r["n_members"]), int(r["n_inits"])) for r in rows]


def write_metrics_json(records: Sequence[MetricRecord], path, metadata: dict | None = None):
    def clean(v):
        # JSON has no NaN/inf: NaN -> null, inf -> "inf"
        if isinstance(v, float) and math.isnan(v):
            return None
        if isinstance(v, float) and math.isinf(v):
            return str(v)
        return v

    payload = {"metadata": {**METRIC_METADATA, **(metadata or {})},
               "records": [{k: clean(v) for k, v in asdict(r).items()} for r in records]}
    Path(path).write_text(json.dumps(payload, indent=2))


def write_spectrum_csv(record: SpectrumRecord, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavenumber", "power"])
        for k, p in zip(record.wavenumbers, record.power):
            w.writerow([int(k), repr(float(p))])


def write_skill_csv(table: SkillTable, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", *[f"lead_{l}" for l in table.leads]])
        for v in table.variables:
            w.writerow([v, *[repr(table.cells.get((v, l), math.nan)) for l in table.leads]])
