import math

import numpy as np
import pytest
import sympy as sp
import torch
from hypothesis import given, settings, strategies as st

from scenecast.diffusion import (
    cosine_schedule,
    posterior_coefficients,
    q_sample,
    reverse_step,
    schedule_from_betas,
    training_loss,
)


@pytest.fixture(scope="module")
def sched():
    return cosine_schedule(1000)


def test_schedule_identities(sched):
    assert sched.alpha_bar[0] == 1.0
    np.testing.assert_array_equal(sched.alpha, 1 - sched.beta)
    np.testing.assert_array_equal(sched.alpha_bar[1:], sched.alpha_bar[:-1] * sched.alpha[1:])
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert sched.alpha_bar[1000] < 1e-3
    assert sched.beta.max() <= 0.999


def test_schedule_matches_closed_form(sched):
    s = 0.008
    f = lambda t: math.cos((t / 1000 + s) / (1 + s) * math.pi / 2) ** 2
    # below the clipping region the cumulative product equals f(t)/f(0)
    for t in (1, 10, 100, 500, 900):
        assert sched.alpha_bar[t] == pytest.approx(f(t) / f(0), rel=1e-9)


def test_beta_tilde_definition(sched):
    t = np.arange(1, 1001)
    expected = (1 - sched.alpha_bar[t - 1]) / (1 - sched.alpha_bar[t]) * sched.beta[t]
    np.testing.assert_allclose(sched.beta_tilde[1:], expected, rtol=1e-12)
    assert sched.beta_tilde[1] == 0.0


def test_q_sample_hand_value():
    s = schedule_from_betas([0.36])
    assert s.alpha_bar[1] == pytest.approx(0.64)
    assert q_sample(np.array([1.0]), 1, np.array([0.5]), s)[0] == pytest.approx(1.1, abs=1e-12)


def test_q_sample_rejects_bad_steps(sched):
    with pytest.raises(ValueError):
        q_sample(np.zeros(2), 0, np.zeros(2), sched)
    with pytest.raises(ValueError):
        q_sample(np.zeros(2), 1001, np.zeros(2), sched)


def test_q_sample_per_item_steps(sched):
    x0 = torch.ones(3, 2)
    eps = torch.zeros(3, 2)
    out = q_sample(x0, torch.tensor([1, 500, 1000]), eps, sched)
    for i, t in enumerate((1, 500, 1000)):
        assert out[i, 0].item() == pytest.approx(math.sqrt(sched.alpha_bar[t]), rel=1e-6)


def test_q_sample_monte_carlo(sched):
    rng = np.random.default_rng(0)
    M = 100_000
    for t, x0 in ((10, 1.3), (400, -0.7), (990, 2.0)):
        x = q_sample(np.full(M, x0), t, rng.standard_normal(M), sched)
        mean, var = math.sqrt(sched.alpha_bar[t]) * x0, 1 - sched.alpha_bar[t]
        assert abs(x.mean() - mean) < 3 * math.sqrt(var / M)
        assert abs(x.var() - var) < 3 * var * math.sqrt(2 / (M - 1))


def _symbolic_coefficients():
    ab_t, ab_prev, beta = sp.symbols("ab_t ab_prev beta", positive=True)
    alpha = 1 - beta
    c0 = sp.sqrt(ab_prev) * beta / (1 - ab_t)
    ct = sp.sqrt(alpha) * (1 - ab_prev) / (1 - ab_t)
    var = (1 - ab_prev) / (1 - ab_t) * beta
    return sp.lambdify((ab_t, ab_prev, beta), (c0, ct, var), "mpmath"), (ab_t, ab_prev, beta, c0, ct, var)


def test_reverse_coefficients_match_symbolic(sched):
    fn, _ = _symbolic_coefficients()
    rng = np.random.default_rng(1)
    for t in rng.integers(2, 1001, 50):
        ours = posterior_coefficients(int(t), sched)
        ref = fn(sched.alpha_bar[t], sched.alpha_bar[t - 1], sched.beta[t])
        for a, b in zip(ours, ref):
            assert abs(a - float(b)) <= 1e-12 * max(1.0, abs(float(b)))


def test_reverse_step_random_scalars():
    fn, _ = _symbolic_coefficients()
    rng = np.random.default_rng(2)
    for _ in range(100):
        betas = rng.uniform(0.001, 0.2, size=5)
        s = schedule_from_betas(betas)
        t = int(rng.integers(2, 6))
        xt, x0, z = rng.normal(size=3)
        c0, ct, var = (float(v) for v in fn(s.alpha_bar[t], s.alpha_bar[t - 1], s.beta[t]))
        got = reverse_step(np.array(xt), np.array(x0), t, s, np.array(z))
        assert abs(got - (c0 * x0 + ct * xt + math.sqrt(var) * z)) < 1e-12


def test_symbolic_step_one_collapses():
    _, (ab_t, ab_prev, beta, c0, ct, var) = _symbolic_coefficients()
    # with alpha_bar_0 = 1 and alpha_bar_1 = 1 - beta_1
    sub = {ab_prev: 1, ab_t: 1 - beta}
    assert sp.simplify(c0.subs(sub)) == 1
    assert sp.simplify(ct.subs(sub)) == 0
    assert sp.simplify(var.subs(sub)) == 0


def test_step_one_returns_prediction_exactly(sched):
    x0 = torch.randn(4, 5)
    out = reverse_step(torch.randn(4, 5), x0, 1, sched, noise=torch.randn(4, 5))
    assert torch.equal(out, x0)


def test_no_noise_identity_for_vanishing_beta():
    x = np.array([0.3, -1.2])
    for beta in (1e-3, 1e-5, 1e-7):
        s = schedule_from_betas([beta] * 3)
        np.testing.assert_allclose(reverse_step(x, x, 3, s), x, atol=10 * beta)


def test_oracle_chain_reaches_x0(sched):
    small = cosine_schedule(50)
    x0 = np.random.default_rng(0).normal(size=6)
    x = np.random.default_rng(1).normal(size=6)
    for t in range(50, 0, -1):
        x = reverse_step(x, x0, t, small)
    np.testing.assert_array_equal(x, x0)


def _loop_loss(pred, target, mask, n):
    total, count = 0.0, 0
    for b in range(pred.shape[0]):
        for f in range(n, pred.shape[-1]):
            if mask[b, f]:
                total += np.abs(pred[b, ..., f] - target[b, ..., f]).sum()
                count += pred[b, ..., f].size
    return total / count


def test_loss_zero_and_constant_offset():
    x = torch.randn(2, 17, 3, 20)
    mask = torch.ones(2, 20, dtype=torch.bool)
    assert training_loss(x, x, mask, 5).item() == 0.0
    assert training_loss(x + 0.25, x, mask, 5).item() == pytest.approx(0.25, abs=1e-6)


def test_loss_matches_loop_with_half_masked():
    rng = np.random.default_rng(3)
    pred, target = rng.normal(size=(2, 4, 3, 12)), rng.normal(size=(2, 4, 3, 12))
    mask = np.ones((2, 12), bool)
    mask[:, 8:] = False
    got = training_loss(torch.from_numpy(pred), torch.from_numpy(target), torch.from_numpy(mask), 4)
    assert got.item() == pytest.approx(_loop_loss(pred, target, mask, 4), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_loss_ignores_masked_values(seed):
    rng = np.random.default_rng(seed)
    pred, target = rng.normal(size=(3, 2, 3, 10)), rng.normal(size=(3, 2, 3, 10))
    mask = rng.random((3, 10)) < 0.6
    mask[:, -1] = True
    a = training_loss(torch.from_numpy(pred), torch.from_numpy(target), torch.from_numpy(mask), 3)
    noisy = target.copy()
    m = np.broadcast_to(mask[:, None, None, :], pred.shape)
    noisy[~m] = np.nan
    b = training_loss(torch.from_numpy(pred), torch.from_numpy(noisy), torch.from_numpy(mask), 3)
    noisy[~m] = 1e6
    c = training_loss(torch.from_numpy(pred), torch.from_numpy(noisy), torch.from_numpy(mask), 3)
    # frames 1..n are excluded even when real
    target_in = target.copy()
    target_in[..., :3] = 42.0
    d = training_loss(torch.from_numpy(pred), torch.from_numpy(target_in), torch.from_numpy(mask), 3)
    assert a.item() == b.item() == c.item() == d.item()


def test_gradient_on_padded_targets_is_zero():
    pred = torch.randn(1, 2, 3, 10, requires_grad=True)
    mask = torch.ones(1, 10, dtype=torch.bool)
    mask[0, 7:] = False
    training_loss(pred, torch.randn(1, 2, 3, 10), mask, 4).backward()
    assert torch.all(pred.grad[..., 7:] == 0) and torch.all(pred.grad[..., :4] == 0)
    assert torch.all(pred.grad[..., 4:7] != 0)


def test_fully_masked_output_is_an_error():
    mask = torch.zeros(1, 10, dtype=torch.bool)
    mask[0, :3] = True
    with pytest.raises(ValueError):
        training_loss(torch.zeros(1, 2, 3, 10), torch.zeros(1, 2, 3, 10), mask, 3)


def test_loss_does_not_modify_mask():
    mask = np.ones((1, 10), bool)
    training_loss(torch.zeros(1, 2, 3, 10), torch.zeros(1, 2, 3, 10), mask, 3)
    assert mask.all()
