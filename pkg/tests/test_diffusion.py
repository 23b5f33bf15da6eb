import numpy as np
import pytest
import torch

from mcldm import ContractError
from mcldm.diffusion import (ddim_step, forward_diffuse, p2_latent_loss, sample,
                             timestep_sequence)
from mcldm.schedules import P2Config, Schedule, make_schedule

SCHED = make_schedule("linear", 1000, 1e-4, 2e-2)


def test_zero_noise_scales_signal():
    z0 = torch.randn(3, 4, 8, 8, dtype=torch.float64)
    t = torch.tensor([1, 500, 1000])
    out = forward_diffuse(z0, t, torch.zeros_like(z0), SCHED)
    for i, ti in enumerate(t.tolist()):
        assert torch.equal(out[i], SCHED.alpha_bar[ti - 1] ** 0.5 * z0[i])


def test_no_diffusion_limit():
    s = Schedule.from_betas([1e-12])
    z0 = torch.randn(2, 3, dtype=torch.float64)
    out = forward_diffuse(z0, torch.tensor([1, 1]), torch.randn(2, 3, dtype=torch.float64), s)
    torch.testing.assert_close(out, z0, atol=1e-5, rtol=0)


def test_forward_preserves_unit_variance():
    gen = torch.Generator().manual_seed(0)
    n = 20000
    z0 = torch.randn(n, 16, generator=gen, dtype=torch.float64)
    eps = torch.randn(n, 16, generator=gen, dtype=torch.float64)
    t = torch.randint(1, 1001, (n,), generator=gen)
    x = forward_diffuse(z0, t, eps, SCHED)
    per_item = x.pow(2).mean(dim=1)
    mean = per_item.mean().item()
    sigma = per_item.std().item() / n ** 0.5
    assert abs(mean - 1.0) < 3 * sigma


def test_forward_shape_mismatch():
    with pytest.raises(ContractError):
        forward_diffuse(torch.zeros(2, 3), torch.tensor([1, 2]), torch.zeros(2, 4), SCHED)


def test_loss_perfect_prediction_is_zero():
    eps = torch.randn(4, 4, 8, 8)
    assert p2_latent_loss(eps, eps.clone(), torch.tensor([1, 2, 3, 4]), SCHED).item() == 0.0


def test_loss_hand_value():
    s = Schedule.from_betas([0.5])  # SNR = 1, weight 1/sqrt(2) for k=1, gamma=0.5
    loss = p2_latent_loss(torch.ones(1, 1, dtype=torch.float64), torch.zeros(1, 1, dtype=torch.float64),
                          torch.tensor([1]), s, P2Config(1.0, 0.5))
    assert loss.item() == pytest.approx(0.7071, abs=1e-4)
    assert loss.item() == pytest.approx(2 ** -0.5, abs=1e-15)


def test_loss_gamma_zero_is_plain_objective():
    gen = torch.Generator().manual_seed(3)
    eps = torch.randn(8, 4, 8, 8, generator=gen, dtype=torch.float64)
    eps_hat = torch.randn(8, 4, 8, 8, generator=gen, dtype=torch.float64)
    t = torch.randint(1, 1001, (8,), generator=gen)
    plain = np.mean(np.sum((eps.numpy() - eps_hat.numpy()) ** 2, axis=(1, 2, 3)))
    got = p2_latent_loss(eps, eps_hat, t, SCHED, P2Config(1.0, 0.0)).item()
    assert abs(got - plain) <= 1e-10


def test_loss_weights_per_item():
    eps = torch.ones(2, 3, dtype=torch.float64)
    eps_hat = torch.zeros(2, 3, dtype=torch.float64)
    t = torch.tensor([10, 900])
    cfg = P2Config(1.0, 0.5)
    snr = SCHED.snr_table()
    expected = np.mean([3.0 / (1 + snr[9]) ** 0.5, 3.0 / (1 + snr[899]) ** 0.5])
    assert p2_latent_loss(eps, eps_hat, t, SCHED, cfg).item() == pytest.approx(expected, rel=1e-12)


def test_loss_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(5)
    eps = torch.randn(3, 2, 2, 2, generator=gen, dtype=torch.float64)
    eps_hat = torch.randn(3, 2, 2, 2, generator=gen, dtype=torch.float64, requires_grad=True)
    t = torch.tensor([3, 300, 999])
    loss = p2_latent_loss(eps, eps_hat, t, SCHED)
    (grad,) = torch.autograd.grad(loss, eps_hat)
    h = 1e-4
    fd = torch.zeros_like(grad)
    base = eps_hat.detach()
    for idx in np.ndindex(*base.shape):
        plus, minus = base.clone(), base.clone()
        plus[idx] += h
        minus[idx] -= h
        fd[idx] = (p2_latent_loss(eps, plus, t, SCHED) - p2_latent_loss(eps, minus, t, SCHED)) / (2 * h)
    rel = (grad - fd).norm() / fd.norm()
    assert rel < 1e-3


def test_loss_shape_mismatch():
    with pytest.raises(ContractError):
        p2_latent_loss(torch.zeros(2, 3), torch.zeros(2, 4), torch.tensor([1, 1]), SCHED)


@pytest.mark.parametrize("t", [1, 10, 250, 999, 1000])
def test_ddim_one_step_inversion(t):
    gen = torch.Generator().manual_seed(t)
    z0 = torch.randn(5, 4, 8, 8, generator=gen, dtype=torch.float64)
    eps = torch.randn(5, 4, 8, 8, generator=gen, dtype=torch.float64)
    zt = forward_diffuse(z0, torch.full((5,), t), eps, SCHED)
    rec = ddim_step(zt, eps, t, 0, 0.0, SCHED)
    assert ((rec - z0).norm() / z0.norm()).item() <= 1e-5


def test_ddim_eta_zero_draws_nothing():
    gen = torch.Generator().manual_seed(0)
    state = gen.get_state()
    z = torch.randn(2, 4, 8, 8)
    a = ddim_step(z, torch.ones_like(z), 500, 480, 0.0, SCHED, gen)
    assert torch.equal(gen.get_state(), state)
    b = ddim_step(z, torch.ones_like(z), 500, 480, 0.0, SCHED, torch.Generator().manual_seed(99))
    assert torch.equal(a, b)


def test_ddim_eta_one_is_stochastic():
    z = torch.randn(2, 4, 8, 8)
    a = ddim_step(z, torch.zeros_like(z), 500, 480, 1.0, SCHED, torch.Generator().manual_seed(1))
    b = ddim_step(z, torch.zeros_like(z), 500, 480, 1.0, SCHED, torch.Generator().manual_seed(2))
    assert not torch.equal(a, b)


def test_ddim_eta_one_matches_posterior_variance():
    # sigma at eta=1 is the DDPM posterior std sqrt(beta_tilde)
    t, tp = 500, 499
    ab_t, ab_p = SCHED.alpha_bar[t - 1], SCHED.alpha_bar[tp - 1]
    beta_tilde = (1 - ab_p) / (1 - ab_t) * SCHED.beta[t - 1]
    z = torch.zeros(20000, 1, dtype=torch.float64)
    out = ddim_step(z, torch.zeros_like(z), t, tp, 1.0, SCHED, torch.Generator().manual_seed(0))
    assert out.std().item() == pytest.approx(beta_tilde ** 0.5, rel=0.03)


@pytest.mark.parametrize("t, tp", [(5, 5), (5, 7)])
def test_ddim_rejects_non_decreasing(t, tp):
    z = torch.zeros(1, 2)
    with pytest.raises(ContractError):
        ddim_step(z, z, t, tp, 0.0, SCHED)


def test_timestep_sequence():
    assert timestep_sequence(1000, 1000) == list(range(1000, 0, -1))
    seq = timestep_sequence(1000, 50)
    assert seq[0] == 1000 and seq[-1] == 1 and len(seq) == 50
    assert all(a > b for a, b in zip(seq, seq[1:]))
    assert timestep_sequence(1000, 1) == [1000]
    with pytest.raises(ContractError):
        timestep_sequence(10, 11)
    with pytest.raises(ContractError):
        timestep_sequence(10, 0)


def _oracle_model(z0):
    def model(z, t, cond):
        ab = torch.from_numpy(SCHED.alpha_bar[t.numpy() - 1]).to(z.dtype).view(-1, 1, 1, 1)
        return (z - ab.sqrt() * z0) / (1 - ab).sqrt()
    return model


def test_sample_full_grid_and_determinism():
    z0 = torch.randn(2, 4, 8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    model = _oracle_model(z0)
    a, traj = sample(model, None, 1000, 0.0, 7, SCHED, (2, 4, 8, 8), dtype=torch.float64,
                     return_trajectory=True)
    assert len(traj) == 1001
    torch.testing.assert_close(a, z0, atol=1e-8, rtol=0)
    b = sample(model, None, 1000, 0.0, 7, SCHED, (2, 4, 8, 8), dtype=torch.float64)
    assert torch.equal(a, b)


def test_sample_manual_loop_equivalence():
    def model(z, t, cond):
        return 0.1 * z + 1e-4 * t.view(-1, 1).to(z.dtype)

    out = sample(model, None, 4, 0.0, 3, SCHED, (2, 5), dtype=torch.float64)
    gen = torch.Generator().manual_seed(3)
    z = torch.randn((2, 5), generator=gen, dtype=torch.float64)
    seq = [1000, 667, 334, 1]
    for t, tp in zip(seq, seq[1:] + [0]):
        z = ddim_step(z, model(z, torch.full((2,), t), None), t, tp, 0.0, SCHED)
    assert torch.equal(out, z)


def test_sample_seed_and_eta():
    def model(z, t, cond):
        return 0.5 * z

    a = sample(model, None, 20, 1.0, 1, SCHED, (2, 3))
    b = sample(model, None, 20, 1.0, 2, SCHED, (2, 3))
    c = sample(model, None, 20, 1.0, 1, SCHED, (2, 3))
    assert not torch.equal(a, b)
    assert torch.equal(a, c)
    with pytest.raises(ContractError):
        sample(model, None, 1001, 0.0, 0, SCHED, (1, 3))
