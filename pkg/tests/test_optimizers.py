import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dropcast.optimizers import (
    NS_COEFFICIENTS,
    HybridMuonAdamW,
    OptimConfig,
    ema_update,
    lr_at,
    newton_schulz_orthogonalize,
    stage1_config,
    stage2_config,
)

# Observed band of the 5-step quintic for well-conditioned wide inputs: about [0.68, 1.14].
NS_BAND = (0.65, 1.2)


def svals(x):
    return torch.linalg.svdvals(x.double())


# --- config and schedule ------------------------------------------------------------


def test_published_hyperparameters():
    s1, s2 = stage1_config(), stage2_config()
    assert (s1.muon_peak_lr, s1.adamw_peak_lr) == (3e-3, 3e-4)
    assert (s2.muon_peak_lr, s2.adamw_peak_lr) == (7e-3, 7e-5)
    assert (s1.muon_weight_decay, s1.adamw_weight_decay) == (0.1, 0.03)
    assert s1.warmup_steps == 1500 and s1.ema_decay == 0.9999
    assert NS_COEFFICIENTS == (3.4445, -4.7750, 2.0315) and s1.ns_iterations == 5


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        OptimConfig(warmup_steps=10, total_steps=5)
    with pytest.raises(ValueError):
        OptimConfig(muon_peak_lr=0)
    with pytest.raises(ValueError):
        OptimConfig(ema_decay=1.5)
    cfg = stage2_config(total_steps=77, warmup_steps=7)
    assert OptimConfig.from_dict(cfg.to_dict()) == cfg


def test_lr_examples():
    cfg = OptimConfig(warmup_steps=100, total_steps=1100, muon_peak_lr=2e-3)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(100, cfg) == 2e-3
    assert abs(lr_at(600, cfg) - 2e-3 * math.cos(math.pi / 4) ** 2) < 1e-15
    assert abs(lr_at(600, cfg) - 1e-3) < 1e-15
    assert lr_at(1100, cfg) == 0.0
    assert lr_at(50, cfg, peak=1.0) == 0.5


@given(st.integers(0, 500), st.integers(0, 5000))
def test_lr_bounded_and_monotone_after_warmup(warmup, extra):
    cfg = OptimConfig(warmup_steps=warmup, total_steps=warmup + extra)
    vals = [lr_at(s, cfg) for s in range(warmup, warmup + extra + 1, max(1, extra // 20))]
    assert all(0 <= v <= cfg.muon_peak_lr for v in vals)
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# --- Newton-Schulz ------------------------------------------------------------------


def test_ns_rank_one_recovers_polar_factor():
    gen = torch.Generator().manual_seed(0)
    u, v = torch.randn(30, generator=gen), torch.randn(50, generator=gen)
    out = newton_schulz_orthogonalize(torch.outer(u, v))
    want = torch.outer(u / u.norm(), v / v.norm())
    cos = (out * want).sum() / (out.norm() * want.norm())
    assert cos > 0.99


@pytest.mark.parametrize("shape", [(64, 128), (128, 64), (32, 256), (256, 512)])
def test_ns_wide_gaussian_lands_in_attractor_band(shape):
    s = svals(newton_schulz_orthogonalize(torch.randn(*shape, generator=torch.Generator().manual_seed(1))))
    assert NS_BAND[0] <= float(s.min()) and float(s.max()) <= NS_BAND[1]


def test_ns_preserves_singular_vectors():
    g = torch.randn(40, 90, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    U, _, Vh = torch.linalg.svd(g, full_matrices=False)
    out = newton_schulz_orthogonalize(g)
    # U^T out V is diagonal when the map acts on singular values only
    core = U.T @ out @ Vh.T
    off = core - torch.diag(torch.diagonal(core))
    assert float(off.abs().max()) < 1e-10


def test_ns_zero_matrix_and_errors():
    assert torch.count_nonzero(newton_schulz_orthogonalize(torch.zeros(3, 4))) == 0
    with pytest.raises(ValueError):
        newton_schulz_orthogonalize(torch.zeros(3))
    with pytest.raises(ValueError):
        newton_schulz_orthogonalize(torch.eye(3), iterations=0)


def test_ns_large_matrices_use_bfloat16_but_return_input_dtype():
    out = newton_schulz_orthogonalize(torch.randn(1001, 1000))
    assert out.dtype == torch.float32


_NS_DEFECT = ("the 5-step quintic with (3.4445, -4.775, 2.0315) oscillates in about [0.68, 1.14], and the "
              "1/sqrt(n) Frobenius scaling of an identity does not reach 0.99; see the decisions ledger")


@pytest.mark.xfail(strict=True, reason=_NS_DEFECT)
def test_ns_identity_example():
    s = svals(newton_schulz_orthogonalize(torch.eye(16)))
    assert float(s.min()) >= 0.99 and float(s.max()) <= 1.01


@pytest.mark.xfail(strict=True, reason=_NS_DEFECT)
def test_ns_gaussian_64x128_example():
    s = svals(newton_schulz_orthogonalize(torch.randn(64, 128, generator=torch.Generator().manual_seed(3))))
    assert float(s.min()) >= 0.7 and float(s.max()) <= 1.3


@pytest.mark.xfail(strict=True, reason=_NS_DEFECT)
def test_ns_idempotence_band():
    x = newton_schulz_orthogonalize(torch.randn(64, 128, generator=torch.Generator().manual_seed(4)))
    assert float((svals(newton_schulz_orthogonalize(x)) - svals(x)).abs().max()) < 0.05


# --- hybrid optimizer ---------------------------------------------------------------


def quiet(**kw):
    return OptimConfig(**{"warmup_steps": 0, "total_steps": 10**6, "muon_weight_decay": 0.0,
                          "adamw_weight_decay": 0.0, **kw})


def test_zero_gradient_leaves_parameters_unchanged():
    w = torch.nn.Parameter(torch.randn(4, 6))
    b = torch.nn.Parameter(torch.randn(4))
    before = (w.detach().clone(), b.detach().clone())
    opt = HybridMuonAdamW([("w", w), ("b", b)], quiet())
    for _ in range(3):
        w.grad, b.grad = torch.zeros_like(w), torch.zeros_like(b)
        opt.step()
    assert torch.equal(w, before[0]) and torch.equal(b, before[1])
    assert opt.zero_updates == 3


def test_parameter_routing():
    named = [("conv", torch.nn.Parameter(torch.randn(4, 3, 3, 3))), ("bias", torch.nn.Parameter(torch.randn(4))),
             ("head", torch.nn.Parameter(torch.randn(2, 4)))]
    assert HybridMuonAdamW(named, quiet()).kind == {"conv": "muon", "bias": "adamw", "head": "muon"}
    assert HybridMuonAdamW(named, quiet(), adamw_names=["head"]).kind["head"] == "adamw"
    assert set(HybridMuonAdamW(named, quiet(use_muon=False)).kind.values()) == {"adamw"}


def test_bias_matches_adamw_hand_roll():
    cfg = OptimConfig(warmup_steps=0, total_steps=10**6, adamw_peak_lr=1e-2, adamw_weight_decay=0.03)
    b = torch.nn.Parameter(torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64))
    opt = HybridMuonAdamW([("b", b)], cfg)
    ref = b.detach().clone()
    m = torch.zeros_like(ref)
    v = torch.zeros_like(ref)
    b1, b2 = cfg.adam_betas
    for t in range(1, 11):
        g = torch.sin(torch.arange(3, dtype=torch.float64) + t)
        b.grad = g.clone()
        opt.step()
        lr = lr_at(t - 1, cfg, cfg.adamw_peak_lr)
        ref = ref * (1 - lr * cfg.adamw_weight_decay)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)).sqrt() + cfg.adam_eps)
        assert torch.allclose(b.detach(), ref, rtol=0, atol=1e-7)


def test_matches_torch_adamw_on_bias():
    cfg = OptimConfig(warmup_steps=0, total_steps=10**6, adamw_peak_lr=1e-2, adamw_weight_decay=0.03)
    b = torch.nn.Parameter(torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64))
    c = torch.nn.Parameter(b.detach().clone())
    ours = HybridMuonAdamW([("b", b)], cfg)
    ref = torch.optim.AdamW([c], lr=1e-2, betas=cfg.adam_betas, eps=cfg.adam_eps, weight_decay=0.03)
    for t in range(10):
        g = torch.cos(torch.arange(3, dtype=torch.float64) * t)
        b.grad, c.grad = g.clone(), g.clone()
        ours.step()
        ref.step()
    assert torch.allclose(b, c, atol=1e-7)


def test_quadratic_bowl_descends():
    W = torch.nn.Parameter(torch.randn(8, 12, generator=torch.Generator().manual_seed(5)))
    opt = HybridMuonAdamW([("W", W)], quiet(muon_peak_lr=1e-2))
    losses = []
    for _ in range(50):
        loss = 0.5 * (W**2).sum()
        losses.append(float(loss.detach()))
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_muon_shape_scale_and_decay():
    # one step from zero momentum: W <- W(1 - lr wd) - lr max(1, sqrt(m/n)) NS(g)
    cfg = OptimConfig(warmup_steps=0, total_steps=10**6, muon_peak_lr=1e-2, muon_weight_decay=0.1,
                      nesterov=False, momentum=0.0)
    W = torch.nn.Parameter(torch.randn(12, 3, dtype=torch.float64))
    w0 = W.detach().clone()
    g = torch.randn(12, 3, dtype=torch.float64)
    W.grad = g.clone()
    HybridMuonAdamW([("W", W)], cfg).step()
    want = w0 * (1 - 1e-2 * 0.1) - 1e-2 * 2.0 * newton_schulz_orthogonalize(g)
    assert torch.allclose(W.detach(), want, atol=1e-12)


def test_update_direction_ignores_gradient_scale():
    def run(scale):
        W = torch.nn.Parameter(torch.zeros(6, 10, dtype=torch.float64))
        opt = HybridMuonAdamW([("W", W)], quiet())
        g = torch.randn(6, 10, generator=torch.Generator().manual_seed(6), dtype=torch.float64)
        prev = W.detach().clone()
        for _ in range(50):
            prev = W.detach().clone()
            W.grad = scale * g
            opt.step()
        return (W.detach() - prev).flatten()

    a, b = run(1.0), run(37.0)
    assert float(a @ b / (a.norm() * b.norm())) > 0.999


def test_nan_gradient_names_parameter():
    w = torch.nn.Parameter(torch.zeros(2, 2))
    opt = HybridMuonAdamW([("enc.conv.weight", w)], quiet())
    w.grad = torch.tensor([[0.0, float("nan")], [0.0, 0.0]])
    with pytest.raises(FloatingPointError, match="enc.conv.weight"):
        opt.step()


def test_state_round_trip_is_bitwise():
    def make():
        torch.manual_seed(0)
        return [("W", torch.nn.Parameter(torch.randn(5, 7))), ("b", torch.nn.Parameter(torch.randn(5)))]

    def feed(params, opt, steps):
        for t in range(steps):
            for _, p in params:
                p.grad = torch.sin(p.detach() * (t + 1))
            opt.step()

    pa = make()
    a = HybridMuonAdamW(pa, quiet())
    feed(pa, a, 3)
    pb = [(n, torch.nn.Parameter(p.detach().clone())) for n, p in pa]
    b = HybridMuonAdamW(pb, quiet())
    b.load_state_arrays({k: v.clone() for k, v in a.state_arrays().items()}, a.step_count)
    feed(pa, a, 4)
    feed(pb, b, 4)
    for (_, x), (_, y) in zip(pa, pb):
        assert torch.equal(x, y)
    with pytest.raises(KeyError):
        b.load_state_arrays({"nope/exp_avg": torch.zeros(1)}, 0)


# --- EMA ----------------------------------------------------------------------------


def test_ema_examples():
    e = [torch.zeros(3)]
    ema_update(e, [torch.full((3,), 2.0)], 0.5)
    assert torch.equal(e[0], torch.ones(3))
    ema_update(e, [torch.full((3,), 7.0)], 1.0)
    assert torch.equal(e[0], torch.ones(3))
    ema_update(e, [torch.full((3,), 7.0)], 0.0)
    assert torch.equal(e[0], torch.full((3,), 7.0))


def test_ema_dict_and_integer_buffers():
    e = {"w": torch.zeros(2), "n": torch.tensor(1)}
    ema_update(e, {"w": torch.ones(2), "n": torch.tensor(9)}, 0.9)
    assert torch.allclose(e["w"], torch.full((2,), 0.1)) and int(e["n"]) == 9
    with pytest.raises(ValueError):
        ema_update([torch.zeros(2)], [torch.zeros(3)], 0.5)
