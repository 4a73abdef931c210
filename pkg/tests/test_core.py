import numpy as np
import pytest
import torch

from vitdiff.core import (
    cfg_combine,
    classifier_guided_epsilon,
    eps_to_score,
    epsilon_loss,
    posterior_mean,
    q_sample,
)
from vitdiff.schedule import make_linear_schedule


def test_q_sample_reference_value(lin4):
    # frozen: sqrt(abar[2]) * 0.5 + sqrt(1 - abar[2]) * (-0.3)
    x0 = torch.full((1, 3, 4, 4), 0.5, dtype=torch.float64)
    eps = torch.full_like(x0, -0.3)
    out = q_sample(x0, torch.tensor([2]), eps, lin4)
    assert out.allclose(torch.full_like(x0, 0.45240667224076153), rtol=1e-12)


def test_q_sample_t_zero_barely_noises(lin4):
    x0 = torch.randn(2, 3, 4, 4)
    eps = torch.randn_like(x0)
    out = q_sample(x0, torch.tensor([0, 0]), eps, lin4)
    # beta_1 = 1e-4, so the clean component dominates
    assert (out - x0).abs().max() < 0.05


def test_q_sample_validation(lin4):
    x0 = torch.zeros(2, 3, 4, 4)
    eps = torch.zeros_like(x0)
    with pytest.raises(ValueError):
        q_sample(x0, torch.tensor([0, 4]), eps, lin4)
    with pytest.raises(ValueError):
        q_sample(x0, torch.tensor([-1, 0]), eps, lin4)
    with pytest.raises(ValueError):
        q_sample(x0, torch.tensor([0]), eps, lin4)  # one t per sample
    with pytest.raises(ValueError):
        q_sample(x0, torch.tensor([0, 0]), eps[:, :1], lin4)


def test_q_sample_inversion(lin50):
    x0 = torch.randn(4, 3, 8, 8, dtype=torch.float64)
    eps = torch.randn_like(x0)
    t = torch.tensor([0, 10, 25, 49])
    x_t = q_sample(x0, t, eps, lin50)
    abar = torch.from_numpy(lin50.alpha_bars[t.numpy()]).reshape(-1, 1, 1, 1)
    rec = (x_t - (1 - abar).sqrt() * eps) / abar.sqrt()
    assert (rec - x0).abs().max() < 1e-5


def test_epsilon_loss_unit_normal_baseline():
    g = torch.Generator().manual_seed(7)
    eps = torch.randn(200000, generator=g)
    loss = epsilon_loss(torch.zeros_like(eps), eps)
    assert abs(float(loss) - 1.0) < 0.05


def test_epsilon_loss_is_elementwise_mse():
    a = torch.tensor([1.0, 2.0, 3.0])
    b = torch.tensor([0.0, 0.0, 0.0])
    assert float(epsilon_loss(a, b)) == pytest.approx(14.0 / 3.0)
    with pytest.raises(ValueError):
        epsilon_loss(a, b[:2])


def test_posterior_mean_reference_value(lin4):
    x_t = torch.full((1, 1, 2, 2), 0.8, dtype=torch.float64)
    eps = torch.full_like(x_t, 0.1)
    out = posterior_mean(x_t, eps, 3, lin4)
    assert out.allclose(torch.full_like(x_t, 0.7959109888952218), rtol=1e-12)


def test_posterior_mean_time_bounds(lin4):
    x = torch.zeros(1, 1, 2, 2)
    for bad in (0, -1, 5):
        with pytest.raises(ValueError):
            posterior_mean(x, x, bad, lin4)
    posterior_mean(x, x, 1, lin4)
    posterior_mean(x, x, 4, lin4)


def test_cfg_combine_identities_and_formula():
    u = torch.randn(2, 3, 4, 4)
    c = torch.randn_like(u)
    assert cfg_combine(u, c, 0.0) is u
    assert cfg_combine(u, c, 1.0) is c
    out = cfg_combine(u, c, 3.0)
    assert torch.allclose(out, u + 3.0 * (c - u))
    with pytest.raises(ValueError):
        cfg_combine(u, c, -0.5)


def test_classifier_guidance(lin4):
    eps = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    grad = torch.randn_like(eps)
    assert classifier_guided_epsilon(eps, grad, 0.0, 2, lin4) is eps
    out = classifier_guided_epsilon(eps, grad, 2.0, 2, lin4)
    expected = eps - 2.0 * (1.0 - lin4.alpha_bars[2]) ** 0.5 * grad
    assert torch.allclose(out, expected, rtol=1e-12)
    with pytest.raises(ValueError):
        classifier_guided_epsilon(eps, grad, 1.0, 4, lin4)


def test_eps_to_score():
    eps = torch.tensor([0.5, -1.0])
    out = eps_to_score(eps, 0.75)
    assert torch.allclose(out, -eps / 0.25**0.5)


def test_q_sample_preserves_dtype(lin4):
    for dt in (torch.float32, torch.float64):
        x0 = torch.zeros(1, 3, 4, 4, dtype=dt)
        out = q_sample(x0, torch.tensor([1]), torch.ones_like(x0), lin4)
        assert out.dtype == dt
