import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from diffcount.diffusion import (
    BIN_HALF_WIDTH,
    DiffusionBatch,
    LossBreakdown,
    NonFiniteLossError,
    count_loss,
    ddim_sample,
    ddim_timesteps,
    forward_corrupt,
    hybrid_loss,
    initial_noise,
    overall_loss,
    predict_x0,
    vlb_terms,
)
from diffcount.schedule import build_schedule

SCHED = build_schedule()


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


class PlantedModel:
    """Returns the noise that is consistent with a known clean map at every t."""

    def __init__(self, x0, schedule):
        self.x0, self.s = x0, schedule

    def __call__(self, y, x, t):
        ab = torch.as_tensor(self.s.alpha_bars[t.numpy() - 1], dtype=x.dtype).view(-1, 1, 1, 1)
        return (x - ab.sqrt() * self.x0) / (1 - ab).sqrt()


class ToyModel:
    """Smooth deterministic stand-in for a network."""

    def __call__(self, y, x, t):
        tt = t.to(x.dtype).view(-1, 1, 1, 1) / 1000.0
        return 0.3 * torch.tanh(x) + 0.1 * y[:, :1] * tt - 0.05 * tt


# -- forward process ----------------------------------------------------------

def test_noise_free_corruption():
    x0 = rand(2, 1, 4, 4)
    t = torch.tensor([7, 500])
    xt = forward_corrupt(x0, torch.zeros_like(x0), t, SCHED)
    ab = torch.tensor(SCHED.alpha_bars[[6, 499]]).view(-1, 1, 1, 1)
    torch.testing.assert_close(xt, ab.sqrt() * x0, rtol=0, atol=0)


def test_small_t_perturbation():
    x0, eps = rand(1, 1, 8, 8), rand(1, 1, 8, 8, seed=1)
    xt = forward_corrupt(x0, eps, torch.tensor([1]), SCHED)
    pert = (xt - x0).norm().item()
    assert pert == pytest.approx(math.sqrt(1e-3) * eps.norm().item(), rel=0.05)


def test_markov_chain_matches_closed_form():
    """Step-by-step x_t = sqrt(a_t) x_{t-1} + sqrt(b_t) z_t with the same draws as
    the closed form's aggregate noise."""
    x0 = rand(1, 1, 8, 8)
    zs = [rand(1, 1, 8, 8, seed=100 + s) for s in range(50)]
    x = x0.clone()
    for t in range(1, 51):
        a, b = SCHED.alphas[t - 1], SCHED.betas[t - 1]
        x = math.sqrt(a) * x + math.sqrt(b) * zs[t - 1]
        # aggregate noise: sum_s sqrt(b_s) prod_{r>s} sqrt(a_r) z_s
        agg = torch.zeros_like(x0)
        for s in range(1, t + 1):
            coef = math.sqrt(SCHED.betas[s - 1]) * math.sqrt(np.prod(SCHED.alphas[s:t]))
            agg += coef * zs[s - 1]
        eps = agg / math.sqrt(1 - SCHED.alpha_bars[t - 1])
        closed = forward_corrupt(x0, eps, torch.tensor([t]), SCHED)
        assert (closed - x).abs().max().item() < 1e-5


def test_printed_coefficient_is_inconsistent_with_the_chain():
    # with (1 - abar) instead of sqrt(1 - abar) the aggregate noise variance no longer matches
    t = 50
    var_chain = sum(SCHED.betas[s - 1] * np.prod(SCHED.alphas[s:t]) for s in range(1, t + 1))
    assert var_chain == pytest.approx(1 - SCHED.alpha_bars[t - 1], rel=1e-12)
    assert var_chain / (1 - SCHED.alpha_bars[t - 1]) ** 2 > 10


def test_inversion_all_t():
    x0, eps = rand(4, 1, 5, 5), rand(4, 1, 5, 5, seed=2)
    for t in [1, 2, 10, 100, 500, 999, 1000]:
        tt = torch.full((4,), t)
        x0_hat = predict_x0(forward_corrupt(x0, eps, tt, SCHED), eps, tt, SCHED)
        assert (x0_hat - x0).abs().max().item() < 1e-6


def test_shape_checks():
    with pytest.raises(ValueError):
        forward_corrupt(rand(1, 1, 4, 4), rand(1, 1, 4, 5), torch.tensor([1]), SCHED)
    with pytest.raises(IndexError):
        forward_corrupt(rand(1, 1, 4, 4), rand(1, 1, 4, 4), torch.tensor([0]), SCHED)


@settings(max_examples=30, deadline=None)
@given(t=st.integers(1, 1000), seed=st.integers(0, 1000))
def test_corrupt_deterministic_property(t, seed):
    x0, eps = rand(2, 1, 3, 3, seed=seed), rand(2, 1, 3, 3, seed=seed + 1)
    a = forward_corrupt(x0, eps, torch.tensor([t, t]), SCHED)
    b = forward_corrupt(x0, eps, torch.tensor([t, t]), SCHED)
    assert torch.equal(a, b) and a.shape == x0.shape
    x0_hat = predict_x0(a, eps, torch.tensor([t, t]), SCHED)
    assert (x0_hat - x0).abs().max().item() < 1e-6


# -- losses -------------------------------------------------------------------

def make_batch(b=2, h=4, w=4, t=(1, 300), seed=0):
    x0 = rand(b, 1, h, w, seed=seed).clamp(-1, 1)
    y = rand(b, 3, h, w, seed=seed + 1)
    eps = rand(b, 1, h, w, seed=seed + 2)
    return DiffusionBatch.make(x0, y, torch.tensor(t), eps, SCHED)


def test_perfect_prediction_zero_eps_term():
    batch = make_batch()
    out = hybrid_loss(batch.eps.clone(), torch.zeros_like(batch.eps), batch, SCHED)
    assert out.weighted_eps_mse.item() == 0.0


def test_weighted_eps_hand_example():
    s1 = build_schedule(1, 1e-3, 1e-3)  # lambda_1 = 0.999 / sqrt(1000)
    x0 = torch.zeros(1, 1, 1, 2, dtype=torch.float64)
    eps = torch.zeros_like(x0)
    batch = DiffusionBatch.make(x0, x0, torch.tensor([1]), eps, s1)
    eps_pred = torch.tensor([[[[1.0, -1.0]]]], dtype=torch.float64)  # squared norm 2
    out = hybrid_loss(eps_pred, torch.zeros_like(x0), batch, s1)
    assert out.weighted_eps_mse.item() == pytest.approx(2 * s1.lambdas[0], rel=1e-12)
    assert out.weighted_eps_mse.item() == pytest.approx(0.063188, abs=1e-5)


def test_mean_reduction_divides_by_pixels():
    batch = make_batch()
    eps_pred = rand(2, 1, 4, 4, seed=9)
    v = torch.zeros_like(eps_pred)
    s = hybrid_loss(eps_pred, v, batch, SCHED, reduction="sum")
    m = hybrid_loss(eps_pred, v, batch, SCHED, reduction="mean")
    assert m.weighted_eps_mse.item() == pytest.approx(s.weighted_eps_mse.item() / 16, rel=1e-12)
    assert m.vlb.item() == pytest.approx(s.vlb.item() / 16, rel=1e-12)
    with pytest.raises(ValueError):
        hybrid_loss(eps_pred, v, batch, SCHED, reduction="max")


def test_vlb_t1_discretized_likelihood_oracle():
    """At t = 1 the bound is the decoder NLL; recompute it pixel by pixel with scipy."""
    x0 = torch.tensor([[[[-1.0, -0.2], [0.5, 1.0]]]], dtype=torch.float64)
    eps = torch.tensor([[[[0.3, -1.2], [0.7, 0.1]]]], dtype=torch.float64)
    eps_pred = eps + 0.05
    v = torch.tensor([[[[-0.5, 0.0], [0.3, 0.9]]]], dtype=torch.float64)
    t = torch.tensor([1])
    xt = forward_corrupt(x0, eps, t, SCHED)
    got = vlb_terms(x0, xt, t, eps_pred, v, SCHED).item()

    b1, ab1 = SCHED.betas[0], SCHED.alpha_bars[0]
    # posterior at t=1: abar_0 = 1, so the mean coefficient on x0 is 1 and on x_t is 0
    logvar_min = math.log(SCHED.posterior_variance[1])
    total = 0.0
    for i in range(2):
        for j in range(2):
            x0_hat = (xt[0, 0, i, j].item() - math.sqrt(1 - ab1) * eps_pred[0, 0, i, j].item()) / math.sqrt(ab1)
            mean = b1 * 1.0 / (1 - ab1) * x0_hat  # coef1 with abar_prev = 1
            frac = (v[0, 0, i, j].item() + 1) / 2
            std = math.exp(0.5 * (frac * math.log(b1) + (1 - frac) * logvar_min))
            x = x0[0, 0, i, j].item()
            if x < -0.999:
                p = norm.cdf((x + BIN_HALF_WIDTH - mean) / std)
            elif x > 0.999:
                p = 1 - norm.cdf((x - BIN_HALF_WIDTH - mean) / std)
            else:
                p = norm.cdf((x + BIN_HALF_WIDTH - mean) / std) - norm.cdf((x - BIN_HALF_WIDTH - mean) / std)
            total += -math.log(p)
    assert got == pytest.approx(total / math.log(2), rel=1e-6)


def test_vlb_kl_zero_at_true_posterior():
    batch = make_batch(t=(5, 600))
    # true noise and variance equal to the clipped posterior (interp coefficient -1)
    v = -torch.ones_like(batch.eps)
    kl = vlb_terms(batch.x0, batch.xt, batch.t, batch.eps, v, SCHED)
    assert kl.abs().max().item() < 1e-9


def test_vlb_does_not_train_the_mean():
    batch = make_batch()
    eps_pred = rand(2, 1, 4, 4, seed=5).requires_grad_(True)
    v = rand(2, 1, 4, 4, seed=6).clamp(-1, 1).requires_grad_(True)
    out = hybrid_loss(eps_pred, v, batch, SCHED)
    g_eps, = torch.autograd.grad(out.vlb, eps_pred, allow_unused=True, retain_graph=True)
    assert g_eps is None or g_eps.abs().max().item() == 0
    g_v, = torch.autograd.grad(out.vlb, v)
    assert g_v.abs().max().item() > 0


def _central_diff(f, x, h=1e-4):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = f(x).item()
        flat[i] = old - h
        fm = f(x).item()
        flat[i] = old
        g.view(-1)[i] = (fp - fm) / (2 * h)
    return g


@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_hybrid_gradients_match_finite_differences(reduction):
    batch = make_batch(t=(1, 40))
    eps_pred = rand(2, 1, 4, 4, seed=11)
    v = (0.5 * rand(2, 1, 4, 4, seed=12)).clamp(-0.9, 0.9)

    def total_wrt_eps(e):
        return hybrid_loss(e, v, batch, SCHED, reduction=reduction).weighted_eps_mse

    def vlb_wrt_v(vv):
        return hybrid_loss(eps_pred, vv, batch, SCHED, reduction=reduction).vlb

    for f, x in [(total_wrt_eps, eps_pred), (vlb_wrt_v, v)]:
        xa = x.clone().requires_grad_(True)
        g, = torch.autograd.grad(f(xa), xa)
        fd = _central_diff(f, x.clone())
        rel = (g - fd).norm() / fd.norm()
        assert rel.item() < 1e-3


def test_count_loss_examples():
    s = SCHED
    t = torch.tensor([3, 700])
    assert count_loss(torch.tensor([5.0, 8.0]), torch.tensor([5.0, 8.0]), t, s).item() == 0.0

    class Half:  # lambda_t = 0.5 for every t
        lambdas = np.full(10, 0.5)
        num_steps = 10

        def check_timestep(self, t):
            pass

    assert count_loss(torch.tensor([10.0]), torch.tensor([7.0]), torch.tensor([2]), Half()).item() == pytest.approx(1.5)

    rng = np.random.default_rng(1)
    pred = torch.tensor(rng.uniform(0, 50, 8))
    true = torch.tensor(rng.integers(0, 50, 8), dtype=torch.float64)
    tt = torch.tensor(rng.integers(1, 1001, 8))
    perm = torch.tensor(rng.permutation(8))
    a = count_loss(pred, true, tt, s).item()
    b = count_loss(pred[perm], true[perm], tt[perm], s).item()
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_count_loss_gradient_finite_differences():
    pred = torch.tensor([3.3, 9.1, 0.7], dtype=torch.float64)
    true = torch.tensor([5.0, 8.0, 2.0], dtype=torch.float64)
    t = torch.tensor([10, 500, 999])
    p = pred.clone().requires_grad_(True)
    g, = torch.autograd.grad(count_loss(p, true, t, SCHED), p)
    fd = _central_diff(lambda x: count_loss(x, true, t, SCHED), pred.clone())
    assert torch.allclose(g, fd, rtol=1e-3)


def test_overall_loss_examples():
    one = torch.tensor(1.0, dtype=torch.float64)
    zero = torch.tensor(0.0, dtype=torch.float64)
    hyb = LossBreakdown(one, zero, zero, one)
    assert overall_loss(hyb, torch.tensor(2.0), 5e-3).total.item() == pytest.approx(1.01, abs=1e-15)
    assert overall_loss(hyb, torch.tensor(0.0)).total.item() == 1.0
    c = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
    g, = torch.autograd.grad(overall_loss(hyb, c, 0.0).total, c, allow_unused=True)
    assert g is None or g.item() == 0.0


def test_total_is_exact_combination():
    batch = make_batch()
    out = hybrid_loss(rand(2, 1, 4, 4, seed=3), torch.zeros(2, 1, 4, 4, dtype=torch.float64), batch, SCHED)
    full = overall_loss(out, torch.tensor(4.0, dtype=torch.float64), 5e-3)
    expect = (full.weighted_eps_mse + 1e-3 * full.vlb) + 5e-3 * full.count_l1
    assert full.total.item() == expect.item()


def test_non_finite_inputs_raise():
    batch = make_batch()
    bad = torch.full((2, 1, 4, 4), float("nan"), dtype=torch.float64)
    with pytest.raises(NonFiniteLossError):
        hybrid_loss(bad, torch.zeros_like(bad), batch, SCHED)


def test_untrained_predictor_expectation():
    """eps_pred = 0 -> E[weighted] = mean(lambda_t) * pixels, over random t."""
    g = torch.Generator().manual_seed(0)
    n, px = 1000, 16
    t = torch.randint(1, 1001, (n,), generator=g)
    eps = torch.randn(n, 1, 4, 4, generator=g, dtype=torch.float64)
    batch = DiffusionBatch.make(torch.zeros_like(eps), torch.zeros_like(eps), t, eps, SCHED)
    got = hybrid_loss(torch.zeros_like(eps), torch.zeros_like(eps), batch, SCHED).weighted_eps_mse.item()
    expect = SCHED.lambdas[t.numpy() - 1].mean() * px
    assert got == pytest.approx(expect, rel=0.05)


# -- DDIM ---------------------------------------------------------------------

def test_ddim_timesteps():
    ts = ddim_timesteps(1000, 100)
    assert ts[0] == 1000 and ts[-1] == 1 and len(ts) == 100
    assert np.all(np.diff(ts) < 0)
    np.testing.assert_array_equal(ddim_timesteps(5, 5), [5, 4, 3, 2, 1])
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)


def test_planted_noise_ddim_recovers_x0():
    x0 = rand(3, 1, 8, 8).clamp(-1, 1)
    eps = rand(3, 1, 8, 8, seed=4)
    xT = forward_corrupt(x0, eps, torch.full((3,), 1000), SCHED)
    y = torch.zeros(3, 3, 8, 8, dtype=torch.float64)
    for steps in (1, 10, 100):
        out = ddim_sample(PlantedModel(x0, SCHED), y, SCHED, steps, x_init=xT)
        assert (out - x0).abs().max().item() < 1e-4


def reference_ddim(model, y, x, schedule):
    """Plain loop over every timestep T..1 in float64."""
    x = x.clone()
    for t in range(schedule.num_steps, 0, -1):
        tb = torch.full((x.shape[0],), t)
        e = model(y, x, tb)
        ab = schedule.alpha_bars[t - 1]
        x0 = ((x - math.sqrt(1 - ab) * e) / math.sqrt(ab)).clamp(-1, 1)
        e = (x - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
        if t > 1:
            abp = schedule.alpha_bars[t - 2]
            x = math.sqrt(abp) * x0 + math.sqrt(1 - abp) * e
    return x0


def test_dense_ddim_matches_reference():
    y = rand(2, 3, 6, 6, seed=7)
    x = initial_noise((2, 1, 6, 6), 5, dtype=torch.float64)
    got = ddim_sample(ToyModel(), y, SCHED, 1000, seed=5)
    ref = reference_ddim(ToyModel(), y, x, SCHED)
    assert (got - ref).abs().max().item() < 1e-5


def test_ddim_deterministic_and_seeded():
    y = rand(2, 3, 6, 6, seed=8)
    a = ddim_sample(ToyModel(), y, SCHED, 20, seed=[3, 4])
    b = ddim_sample(ToyModel(), y, SCHED, 20, seed=[3, 4])
    c = ddim_sample(ToyModel(), y, SCHED, 20, seed=[3, 9])
    assert torch.equal(a, b)
    assert torch.equal(a[0], c[0]) and not torch.equal(a[1], c[1])


def test_initial_noise_is_batch_independent():
    full = initial_noise((3, 1, 4, 4), [10, 11, 12])
    single = initial_noise((1, 1, 4, 4), [11])
    assert torch.equal(full[1], single[0])
    assert torch.equal(initial_noise((3, 1, 4, 4), 10), full)
    with pytest.raises(ValueError):
        initial_noise((2, 1, 4, 4), [1])
