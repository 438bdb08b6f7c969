import json

import numpy as np
import pytest
import torch

from dropcast.backbone import ModelConfig, StochasticTag, build, forward
from dropcast.curriculum import Checkpoint, ToyDataset
from dropcast.grid import make_equiangular_grid
from dropcast.rollout import (
    ArchiveError,
    EnsembleForecast,
    autoregress,
    member_seed,
    read_archive,
    roll_forward,
    write_archive,
)
from dropcast.toyatmos import DynamicsParams, denormalize_values, simulate


@pytest.fixture(scope="module")
def data():
    return ToyDataset.from_trajectory(simulate(make_equiangular_grid(16, 32), DynamicsParams(), 120))


def make_ckpt(data, seed=0, scale=0.05, **kw):
    cfg = ModelConfig(in_channels=12, out_channels=4, base_width=8, channel_multipliers=(1, 2),
                      blocks_per_resolution=1, attention_levels=(), **{"dropout_rate": 0.2, **kw})
    m = build(cfg, data.grid, seed=seed)
    if scale:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in m.parameters():
                p.add_(scale * torch.randn(p.shape, generator=g))
    sd = {k: v.clone() for k, v in m.state_dict().items()}
    return Checkpoint(cfg, data.grid, data.stats, data.forcing, data.channel_names, "stage2", 0, sd, sd)


def test_zero_residual_model_is_persistence(data):
    ck = make_ckpt(data, scale=0)  # zero-initialized output layer
    w = data.val[3]
    fc = roll_forward([ck], w, 5, 3)
    last = denormalize_values(w.last_state.astype(np.float64), data.stats)
    for lead in range(5):
        for m in range(3):
            np.testing.assert_allclose(fc.members[m, lead], last, rtol=1e-6, atol=1e-6)


def test_single_deterministic_step_is_one_forward_pass(data):
    ck = make_ckpt(data)
    w = data.val[2]
    fc = roll_forward([ck], w, 1, 1, stochastic=False)
    resid = forward(ck.inference_model(), w)
    want = denormalize_values((w.last_state + resid).astype(np.float64), data.stats)
    np.testing.assert_allclose(fc.members[0, 0], want, rtol=1e-6, atol=1e-5)


def test_same_seed_is_bitwise_reproducible(data, tmp_path):
    cks = [make_ckpt(data, 0), make_ckpt(data, 1)]
    a = roll_forward(cks, data.val[0], 4, 3, seed=9)
    b = roll_forward(cks, data.val[0], 4, 3, seed=9)
    assert np.array_equal(a.members, b.members)
    write_archive(a, tmp_path / "a")
    write_archive(b, tmp_path / "b")
    for name in ["manifest.json"] + [f"member_{i:04d}.bin" for i in range(6)]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = roll_forward(cks, data.val[0], 4, 3, seed=10)
    assert not np.array_equal(a.members, c.members)


def test_member_layout_and_ids(data):
    fc = roll_forward([make_ckpt(data, 0), make_ckpt(data, 1)], data.val[0], 3, 4, seed=5)
    assert fc.members.shape == (8, 3, 4, 16, 32) and fc.n_members == 8
    assert fc.member_ids == [(k, member_seed(5, k, n)) for k in range(2) for n in range(4)]
    assert fc.lead_steps == [1, 2, 3] and fc.init_time == data.val[0].time_index
    assert fc.units == "physical" and not fc.truncated


def test_members_are_exchangeable(data):
    """Row b of a batched rollout depends only on its own seed."""
    ck = make_ckpt(data)
    m = ck.inference_model()
    w = data.val[1]
    z = torch.as_tensor(w.inputs)
    C = w.n_channels
    seeds = [11, 22, 33, 44]
    perm = [2, 0, 3, 1]
    args = lambda s: (m, z[:C].expand(len(s), -1, -1, -1), z[C:].expand(len(s), -1, -1, -1),  # noqa: E731
                      w.time_index, 3, data.forcing, data.grid, s)
    a, _ = autoregress(*args(seeds))
    b, _ = autoregress(*args([seeds[i] for i in perm]))
    assert torch.equal(a[:, perm], b)


def test_deterministic_mode_has_zero_spread(data):
    fc = roll_forward([make_ckpt(data)], data.val[0], 3, 4, stochastic=False)
    assert np.all(fc.members.std(axis=0) == 0)
    adaln = make_ckpt(data, stochastic_mode="deterministic")
    fc = roll_forward([adaln], data.val[0], 3, 4)
    assert np.all(fc.members.std(axis=0) == 0)


def test_dropout_members_differ(data):
    fc = roll_forward([make_ckpt(data)], data.val[0], 2, 3)
    assert fc.members.std(axis=0).max() > 0


def test_frozen_schedule_reuses_masks(data):
    ck = make_ckpt(data)
    per = roll_forward([ck], data.val[0], 3, 2, mask_schedule="per_step")
    frozen = roll_forward([ck], data.val[0], 3, 2, mask_schedule="frozen")
    assert np.array_equal(per.members[:, 0], frozen.members[:, 0])
    assert not np.array_equal(per.members[:, 2], frozen.members[:, 2])
    with pytest.raises(ValueError):
        roll_forward([ck], data.val[0], 3, 2, mask_schedule="sometimes")


def test_nan_truncates_member(data):
    ck = make_ckpt(data)
    ck.ema_weights["out_conv.weight"] = torch.full_like(ck.ema_weights["out_conv.weight"], 1e30)
    fc = roll_forward([ck], data.val[0], 4, 2)
    assert fc.truncated  # members blew up and were cut
    for i, n in fc.truncated.items():
        assert np.all(np.isfinite(fc.members[i, :n])) and np.all(np.isnan(fc.members[i, n:]))


def test_input_validation(data):
    ck = make_ckpt(data)
    with pytest.raises(ValueError):
        roll_forward([ck], data.val[0], 0, 2)
    with pytest.raises(ValueError):
        roll_forward([ck], data.val[0], 2, 0)
    with pytest.raises(ValueError):
        roll_forward([], data.val[0], 2, 2)
    other = ToyDataset.from_trajectory(simulate(make_equiangular_grid(16, 32), DynamicsParams(seed=3), 60))
    with pytest.raises(ValueError, match="disagree"):
        roll_forward([ck, make_ckpt(other)], data.val[0], 2, 2)


def test_tag_forward_matches_rollout_keys(data):
    ck = make_ckpt(data)
    w = data.val[0]
    fc = roll_forward([ck], w, 1, 1, seed=4, physical=False)
    resid = forward(ck.inference_model(), w, StochasticTag(member_seed(4, 0, 0), step=0))
    np.testing.assert_allclose(fc.members[0, 0], w.last_state + resid, atol=1e-6)


# --- archives -----------------------------------------------------------------------


def random_forecast(M=8, L=10, C=4, H=32, W=64):
    rng = np.random.default_rng(0)
    return EnsembleForecast(
        members=rng.normal(size=(M, L, C, H, W)).astype(np.float32).astype(np.float64),
        init_time=17, member_ids=[(m // 4, 100 + m) for m in range(M)], lead_steps=list(range(1, L + 1)),
        channel_names=("a", "b", "c", "d")[:C], grid=make_equiangular_grid(H, W))


def test_archive_round_trip_and_dimensions(tmp_path):
    fc = random_forecast()
    write_archive(fc, tmp_path / "fc")
    m = json.loads((tmp_path / "fc" / "manifest.json").read_text())
    assert (m["n_members"], m["n_leads"], m["n_channels"], m["n_lat"], m["n_lon"]) == (8, 10, 4, 32, 64)
    assert (tmp_path / "fc" / "member_0007.bin").stat().st_size == 10 * 4 * 32 * 64 * 4
    back = read_archive(tmp_path / "fc")
    assert np.array_equal(back.members, fc.members)
    assert back.member_ids == fc.member_ids and back.grid == fc.grid and back.init_time == 17


def test_archive_version_and_corruption_errors(tmp_path):
    write_archive(random_forecast(M=2, L=1, H=4, W=8), tmp_path / "fc")
    mpath = tmp_path / "fc" / "manifest.json"
    good = json.loads(mpath.read_text())
    mpath.write_text(json.dumps({**good, "format_version": 2}))
    with pytest.raises(ArchiveError, match="version"):
        read_archive(tmp_path / "fc")
    mpath.write_text("{not json")
    with pytest.raises(ArchiveError, match="corrupt"):
        read_archive(tmp_path / "fc")
    mpath.write_text(json.dumps({k: v for k, v in good.items() if k != "n_lat"}))
    with pytest.raises(ArchiveError, match="corrupt"):
        read_archive(tmp_path / "fc")
    with pytest.raises(FileNotFoundError):
        read_archive(tmp_path / "missing")


def test_forecast_validation():
    with pytest.raises(ValueError):
        EnsembleForecast(np.zeros((2, 1, 1, 2)), 0, [(0, 0)] * 2, [1])
    with pytest.raises(ValueError):
        EnsembleForecast(np.zeros((2, 1, 1, 2, 2)), 0, [(0, 0)], [1])
    with pytest.raises(ValueError):
        EnsembleForecast(np.zeros((2, 1, 1, 2, 2)), 0, [(0, 0)] * 2, [1, 2])
