import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dropcast.grid import area_weights, make_equiangular_grid
from dropcast.objectives import fair_crps
from dropcast.rollout import EnsembleForecast
from dropcast.toyatmos import StateTensor
from dropcast.verification import (
    METRIC_COLUMNS,
    MetricRecord,
    eval_crps,
    eval_rmse_spread_ssr,
    evaluate,
    forecast_spectra,
    read_metrics_csv,
    relative_skill,
    write_metrics_csv,
    write_metrics_json,
    write_skill_csv,
    write_spectrum_csv,
    zonal_spectrum,
)

NAMES = ("u", "v", "t", "q")


def fc(members, init=0, grid=None):
    M, L, C, H, W = members.shape
    return EnsembleForecast(members, init, [(0, m) for m in range(M)], list(range(1, L + 1)),
                            channel_names=NAMES[:C], grid=grid or make_equiangular_grid(H, W))


def truth_dict(y, init=0):
    """y: (L, C, H, W) truth for leads 1..L after ``init``."""
    return {init + 1 + l: y[l] for l in range(y.shape[0])}


def by_cell(records, key):
    return {(r.variable, r.lead): getattr(r, key) for r in records}


# --- CRPS ---------------------------------------------------------------------------


def test_perfect_members_score_zero():
    y = np.random.default_rng(0).normal(size=(3, 2, 6, 8))
    recs = eval_crps(fc(np.stack([y, y, y])), truth_dict(y))
    assert all(r.crps == 0 for r in recs) and len(recs) == 6


def test_symmetric_pair_scores_zero():
    y = np.random.default_rng(1).normal(size=(2, 2, 6, 8))
    recs = eval_crps(fc(np.stack([y - 1, y + 1])), truth_dict(y))
    assert max(abs(r.crps) for r in recs) < 1e-12


def test_crps_matches_objectives_per_lead():
    rng = np.random.default_rng(2)
    g = make_equiangular_grid(6, 8)
    inits = [0, 5, 9]
    X = rng.normal(size=(3, 4, 2, 3, 6, 8))
    traj = rng.normal(size=(20, 3, 6, 8))
    truth = [StateTensor(traj[t], t, NAMES[:3]) for t in range(20)]
    recs = by_cell(eval_crps([fc(X[i], inits[i], g) for i in range(3)], truth), "crps")
    a = area_weights(g)
    for lead in (1, 2):
        members = torch.from_numpy(np.stack([X[i, :, lead - 1] for i in range(3)], axis=1))
        target = torch.from_numpy(np.stack([traj[t + lead] for t in inits]))
        per = fair_crps(members, target, a).per_channel
        for c in range(3):
            assert abs(recs[(NAMES[c], lead)] - float(per[c])) < 1e-10


def test_single_init_single_lead_equals_fair_crps_exactly():
    rng = np.random.default_rng(3)
    X, y = rng.normal(size=(5, 1, 1, 6, 8)), rng.normal(size=(1, 1, 6, 8))
    (rec,) = eval_crps(fc(X), truth_dict(y))
    want = fair_crps(torch.from_numpy(X[:, 0]), torch.from_numpy(y[0]), area_weights(make_equiangular_grid(6, 8)))
    assert rec.crps == float(want.total)


def test_misaligned_truth_is_an_error():
    y = np.zeros((2, 1, 4, 4))
    with pytest.raises(ValueError, match="no state at time"):
        eval_crps(fc(np.zeros((2, 3, 1, 4, 4))), truth_dict(y))
    with pytest.raises(ValueError, match="shape"):
        eval_crps(fc(np.zeros((2, 2, 1, 4, 4))), truth_dict(np.zeros((2, 1, 4, 5))))
    with pytest.raises(ValueError, match="at least 2"):
        eval_crps(fc(np.zeros((1, 2, 1, 4, 4))), truth_dict(y))


def test_init_order_invariance():
    rng = np.random.default_rng(4)
    traj = {t: rng.normal(size=(2, 4, 6)) for t in range(30)}
    fcs = [fc(rng.normal(size=(3, 2, 2, 4, 6)), init) for init in (0, 7, 15, 22)]
    a = evaluate(fcs, traj)
    b = evaluate(fcs[::-1], traj)
    for ra, rb in zip(a, b):
        assert ra.crps == pytest.approx(rb.crps, rel=1e-14)
        assert ra.rmse == pytest.approx(rb.rmse, rel=1e-14)
        assert ra.spread == pytest.approx(rb.spread, rel=1e-14)


# --- RMSE / spread / SSR ------------------------------------------------------------


def test_rmse_spread_against_loop_oracle():
    rng = np.random.default_rng(5)
    g = make_equiangular_grid(4, 5)
    a = area_weights(g).normalized
    X = rng.normal(size=(2, 3, 1, 1, 4, 5))   # inits, members, lead, channel
    Y = rng.normal(size=(2, 1, 1, 4, 5))
    mse = var = 0.0
    for i in range(2):
        for h in range(4):
            for w in range(5):
                vals = X[i, :, 0, 0, h, w]
                mean = sum(vals) / 3
                mse += a[h] * (mean - Y[i, 0, 0, h, w]) ** 2 / 20
                var += a[h] * sum((v - mean) ** 2 for v in vals) / 2 / 20
    (rec,) = eval_rmse_spread_ssr([fc(X[0], 0, g), fc(X[1], 10, g)], {1: Y[0, 0], 11: Y[1, 0]})
    assert rec.rmse == pytest.approx(math.sqrt(mse / 2), rel=1e-12)
    assert rec.spread == pytest.approx(math.sqrt(var / 2), rel=1e-12)
    assert rec.ssr == pytest.approx(math.sqrt(4 / 3) * rec.spread / rec.rmse, rel=1e-12)
    assert rec.n_members == 3 and rec.n_inits == 2


def test_ssr_edge_cases():
    y = np.random.default_rng(6).integers(-5, 5, size=(1, 1, 4, 4)).astype(float)  # exact ensemble mean
    (rec,) = eval_rmse_spread_ssr(fc(np.stack([y - 1, y + 1])), truth_dict(y))
    assert rec.rmse == 0 and rec.spread > 0 and rec.ssr == math.inf
    (rec,) = eval_rmse_spread_ssr(fc(np.stack([y + 2, y + 2])), truth_dict(y))
    assert rec.spread == 0 and rec.ssr == 0
    (rec,) = eval_rmse_spread_ssr(fc(np.stack([y, y])), truth_dict(y))
    assert math.isnan(rec.ssr)


def test_consistent_ensemble_has_unit_ssr():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((8, 1, 1, 100, 1000))
    y = rng.standard_normal((1, 1, 100, 1000))
    g = make_equiangular_grid(100, 1000)
    (rec,) = eval_rmse_spread_ssr(fc(X, grid=g), truth_dict(y), weights=np.ones(100))
    assert 0.9 <= rec.ssr <= 1.1


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 2**31 - 1))
def test_ssr_scale_equivariance(lam, seed):
    rng = np.random.default_rng(seed)
    X, y = rng.normal(size=(4, 1, 1, 3, 4)), rng.normal(size=(1, 1, 3, 4))
    (a,) = eval_rmse_spread_ssr(fc(X), truth_dict(y))
    (b,) = eval_rmse_spread_ssr(fc(lam * X), truth_dict(lam * y))
    assert b.ssr == pytest.approx(a.ssr, rel=1e-12)


# --- spectra ------------------------------------------------------------------------


def test_pure_tone_spectrum():
    g = make_equiangular_grid(8, 64)
    w = np.arange(64)
    x = np.broadcast_to(np.sin(2 * np.pi * 3 * w / 64), (8, 64))
    rec = zonal_spectrum(x, g)
    assert len(rec.power) == 33 and rec.wavenumbers[-1] == 32
    peak = rec.power.max()
    assert np.argmax(rec.power) == 3 and abs(peak - 0.5) < 1e-12
    assert np.all(np.delete(rec.power, 3) < 1e-10 * peak)


def test_constant_field_spectrum():
    g = make_equiangular_grid(8, 16)
    rec = zonal_spectrum(np.full((3, 8, 16), 2.5), g)
    assert rec.power[0] == pytest.approx(6.25)
    assert np.all(rec.power[1:] < 1e-20)


@pytest.mark.parametrize("W", [64, 63])
def test_parseval(W):
    g = make_equiangular_grid(12, W)
    x = np.random.default_rng(8).normal(size=(5, 12, W)) + 0.3
    rec = zonal_spectrum(x, g, lat_band=(-40.0, 40.0))
    band = x[:, np.abs(g.lat_centers) <= 40]
    assert band.shape[1] == 6
    assert rec.power.sum() == pytest.approx((band**2).mean(), rel=1e-6)


def test_white_noise_is_flat():
    W, rows = 64, 1000
    g = make_equiangular_grid(rows, W)
    x = np.random.default_rng(9).standard_normal((rows, W))
    rec = zonal_spectrum(x, g, lat_band=(-90.0, 90.0))
    interior = rec.power[1:W // 2]
    # each interior bin of a row is (2/W) * chi^2_2 / 2: mean 2/W, std 2/W
    expected, sigma = 2 / W, (2 / W) / math.sqrt(rows)
    assert np.all(np.abs(interior - expected) < 3 * sigma)


def test_spectrum_errors():
    g = make_equiangular_grid(8, 16)
    with pytest.raises(ValueError, match="no grid rows"):
        zonal_spectrum(np.zeros((8, 16)), g, lat_band=(1.0, 2.0))
    with pytest.raises(ValueError, match="grid shape"):
        zonal_spectrum(np.zeros((8, 15)), g)


def test_forecast_spectra_cover_cells():
    recs = forecast_spectra(fc(np.random.default_rng(0).normal(size=(3, 2, 2, 8, 16))))
    assert [(r.variable, r.lead) for r in recs] == [("u", 1), ("v", 1), ("u", 2), ("v", 2)]


# --- relative skill -----------------------------------------------------------------


def recs(values, metric="crps"):
    return [MetricRecord(v, l, **{metric: x}) for (v, l), x in values.items()]


def test_relative_skill_published_spot_value():
    t = relative_skill(recs({("z500", 1): 19.6}), recs({("z500", 1): 22.4}))
    assert t.cells[("z500", 1)] == -12.5


def test_relative_skill_examples():
    ref = {("a", 1): 2.0, ("a", 2): 3.0, ("b", 1): 5.0, ("b", 2): 7.0}
    same = relative_skill(recs(ref), recs(ref))
    assert all(v == 0 for v in same.cells.values())
    half = relative_skill(recs({k: v / 2 for k, v in ref.items()}), recs(ref))
    assert all(v == -50 for v in half.cells.values()) and half.aggregate == -50
    assert half.variables == ["a", "b"] and half.leads == [1, 2]


def test_relative_skill_errors_and_nan():
    with pytest.raises(KeyError):
        relative_skill(recs({("a", 1): 1.0}), recs({("a", 2): 1.0}))
    with pytest.raises(ZeroDivisionError):
        relative_skill(recs({("a", 1): 1.0}), recs({("a", 1): 0.0}))
    t = relative_skill(recs({("a", 1): math.nan, ("a", 2): 1.0}), recs({("a", 1): 1.0, ("a", 2): 2.0}))
    assert math.isnan(t.cells[("a", 1)]) and t.aggregate == -50
    t = relative_skill(recs({("a", 1): 1.0}, "rmse"), recs({("a", 1): 4.0}, "rmse"), metric="rmse")
    assert t.cells[("a", 1)] == -75 and t.metric == "rmse"


# --- output -------------------------------------------------------------------------


def test_metrics_csv_round_trip(tmp_path):
    y = np.random.default_rng(10).normal(size=(2, 2, 4, 4))
    records = evaluate(fc(np.random.default_rng(11).normal(size=(3, 2, 2, 4, 4))), truth_dict(y))
    write_metrics_csv(records, tmp_path / "m" / "metrics.csv")
    header = (tmp_path / "m" / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(METRIC_COLUMNS)
    assert read_metrics_csv(tmp_path / "m" / "metrics.csv") == records


def test_metrics_json_handles_nonfinite(tmp_path):
    write_metrics_json([MetricRecord("a", 1, 1.0, 0.0, 1.0, math.inf), MetricRecord("a", 2)],
                       tmp_path / "m.json", {"units": "physical"})
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["metadata"]["variance_divisor"] == "M-1" and d["metadata"]["units"] == "physical"
    assert d["records"][0]["ssr"] == "inf" and d["records"][1]["crps"] is None


def test_spectrum_and_skill_csv(tmp_path):
    rec = zonal_spectrum(np.ones((4, 8)), make_equiangular_grid(4, 8))
    write_spectrum_csv(rec, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "wavenumber,power" and len(lines) == 6
    write_skill_csv(relative_skill(recs({("a", 1): 1.0}), recs({("a", 1): 2.0})), tmp_path / "k.csv")
    assert (tmp_path / "k.csv").read_text().splitlines() == ["variable,lead_1", "a,-50.0"]
