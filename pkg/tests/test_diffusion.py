import math

import numpy as np
import pytest
import torch

from recdiff.config import ConfigError
from recdiff.diffusion import (DiffusionDenoiser, diffusion_loss, make_schedule,
                               predict_noise, q_sample, sample_augmentation,
                               timestep_embedding)


# ---------------------------------------------------------------- schedule

def test_single_step_schedule():
    sched = make_schedule(1, 0.1, 0.1)
    assert abs(sched.alpha_bar(1) - 0.9) < 1e-12
    assert sched.alpha_bar(0) == 1.0


def test_three_step_product():
    sched = make_schedule(3, 0.1, 0.3)
    assert torch.allclose(sched.betas, torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64))
    assert abs(sched.alpha_bar(3) - 0.9 * 0.8 * 0.7) < 1e-12


def test_default_schedule_strictly_decreasing():
    sched = make_schedule(100)
    bars = sched.alpha_bars.numpy()
    expected = np.cumprod(1.0 - np.linspace(1e-4, 0.02, 100))
    np.testing.assert_allclose(bars, expected, rtol=1e-12)
    assert np.all(np.diff(bars) < 0)
    assert bars[-1] < bars[0] < 1.0


def test_schedule_validation():
    with pytest.raises(ConfigError):
        make_schedule(0)
    with pytest.raises(ConfigError):
        make_schedule(10, 0.2, 0.1)
    with pytest.raises(ConfigError):
        make_schedule(10, 0.0, 0.1)


# ---------------------------------------------------------------- forward corruption

def test_q_sample_identity_at_t_zero():
    sched = make_schedule(5)
    x0 = torch.randn(4)
    xt = q_sample(x0, 0, torch.randn(4), sched)
    assert torch.equal(xt, x0)


def test_q_sample_direct_substitution():
    sched = make_schedule(1, 0.75, 0.75)          # alpha_bar(1) = 0.25
    x0 = torch.tensor([1.0, 0.0])
    eps = torch.tensor([0.0, 1.0])
    xt = q_sample(x0, 1, eps, sched)
    assert torch.allclose(xt, torch.tensor([0.5, math.sqrt(0.75)]), atol=1e-7)


def test_q_sample_pure_noise_for_zero_signal():
    sched = make_schedule(10)
    eps = torch.randn(100, 8)
    t = torch.randint(1, 11, (100,))
    xt = q_sample(torch.zeros(100, 8), t, eps, sched)
    bars = torch.cat([torch.ones(1, dtype=torch.float64), sched.alpha_bars])
    scale = torch.sqrt(1.0 - bars[t]).to(torch.float32).view(-1, 1)
    assert torch.allclose(xt, scale * eps, atol=1e-7)


def test_q_sample_unit_variance_preserved():
    sched = make_schedule(50)
    gen = torch.Generator().manual_seed(0)
    n = 100_000
    x0 = torch.randn(n, 2, generator=gen)
    eps = torch.randn(n, 2, generator=gen)
    xt = q_sample(x0, 25, eps, sched)
    var = xt.var(dim=0)
    assert torch.all((var - 1.0).abs() < 0.02)


def test_q_sample_t_out_of_range():
    sched = make_schedule(5)
    with pytest.raises(ValueError, match=r"t must be in \[0, 5\]"):
        q_sample(torch.zeros(2), 6, torch.zeros(2), sched)


# ---------------------------------------------------------------- denoiser

def test_zero_final_layer_predicts_zero():
    net = DiffusionDenoiser(4, hidden_width=8, time_embed_width=4)
    with torch.no_grad():
        net.out.weight.zero_()
        net.out.bias.zero_()
    out = predict_noise(torch.randn(3, 4), torch.randn(3, 4), 2, net)
    assert torch.equal(out, torch.zeros(3, 4))


def test_conditioning_signal_is_live():
    torch.manual_seed(0)
    net = DiffusionDenoiser(4, hidden_width=16, time_embed_width=4)
    x = torch.randn(4)
    s = torch.randn(4, requires_grad=True)
    out = net(x, s, 1)
    grad = torch.autograd.grad(out.sum(), s)[0]
    assert grad.abs().sum() > 0


def test_denoiser_matches_matvec_oracle():
    torch.manual_seed(1)
    net = DiffusionDenoiser(3, hidden_width=5, time_embed_width=4).double()
    x = torch.randn(3, dtype=torch.float64)
    s = torch.randn(3, dtype=torch.float64)
    t = 2

    def gelu(v):
        return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))

    temb = timestep_embedding(torch.tensor([t]), 4)[0].numpy()
    inp = np.concatenate([x.numpy(), s.numpy(), temb])
    h1 = np.array([gelu(v) for v in net.fc1.weight.detach().numpy() @ inp
                   + net.fc1.bias.detach().numpy()])
    h2 = np.array([gelu(v) for v in net.fc2.weight.detach().numpy() @ h1
                   + net.fc2.bias.detach().numpy()])
    expected = net.out.weight.detach().numpy() @ h2 + net.out.bias.detach().numpy()
    np.testing.assert_allclose(net(x, s, t).detach().numpy(), expected, atol=1e-6)


def test_denoiser_shape_mismatch():
    net = DiffusionDenoiser(4)
    with pytest.raises(ValueError, match="expects width 4"):
        net(torch.zeros(5), torch.zeros(5), 1)


# ---------------------------------------------------------------- loss

def test_loss_with_zero_denoiser_near_one():
    sched = make_schedule(10)
    gen = torch.Generator().manual_seed(3)
    x0 = torch.randn(10_000, 8, generator=gen)
    s = torch.zeros(10_000, 8)
    loss = diffusion_loss(x0, s, lambda x_t, cond, t: torch.zeros_like(x_t),
                          sched, generator=gen)
    assert abs(float(loss) - 1.0) < 0.05


def test_loss_with_noise_oracle_is_exactly_zero():
    sched = make_schedule(10)
    x0 = torch.randn(16, 4)
    frozen_eps = torch.randn(16, 4)
    frozen_t = torch.randint(1, 11, (16,))
    loss = diffusion_loss(x0, torch.zeros(16, 4), lambda x_t, cond, t: frozen_eps,
                          sched, t=frozen_t, eps=frozen_eps)
    assert float(loss) == 0.0


def test_loss_nonnegative_and_empty_batch_rejected():
    sched = make_schedule(5)
    net = DiffusionDenoiser(4, hidden_width=8, time_embed_width=4)
    gen = torch.Generator().manual_seed(0)
    loss = diffusion_loss(torch.randn(8, 4), torch.randn(8, 4), net, sched, generator=gen)
    assert float(loss.detach()) >= 0.0
    with pytest.raises(ValueError, match="non-empty"):
        diffusion_loss(torch.zeros(0, 4), torch.zeros(0, 4), net, sched)


# ---------------------------------------------------------------- sampling

def test_one_step_closed_form():
    sched = make_schedule(1, 0.19, 0.19)
    x1 = torch.tensor([2.0, -4.0])
    out = sample_augmentation(x1, torch.zeros(2),
                              lambda x_t, cond, t: torch.zeros_like(x_t), sched)
    assert torch.allclose(out, x1 / math.sqrt(0.81), atol=1e-6)


def test_sampling_deterministic_under_fixed_generator():
    torch.manual_seed(5)
    sched = make_schedule(8)
    net = DiffusionDenoiser(4, hidden_width=8, time_embed_width=4)
    x_t = torch.randn(3, 4)
    s = torch.randn(3, 4)
    a = sample_augmentation(x_t, s, net, sched, torch.Generator().manual_seed(1))
    b = sample_augmentation(x_t, s, net, sched, torch.Generator().manual_seed(1))
    assert torch.equal(a, b)
    c = sample_augmentation(x_t, s, net, sched, torch.Generator().manual_seed(2))
    assert not torch.equal(a, c)


def test_sampling_divergence_reports_step():
    sched = make_schedule(4)

    def explosive(x_t, cond, t):
        return torch.full_like(x_t, float("inf"))

    with pytest.raises(RuntimeError, match="diffusion sampling diverged at step 4"):
        sample_augmentation(torch.zeros(2), torch.zeros(2), explosive, sched,
                            torch.Generator().manual_seed(0))


def test_conditioning_steers_samples_toward_matching_cluster():
    # two synthetic intents far apart; augmentations must follow their signal
    torch.manual_seed(11)
    sched = make_schedule(10)
    net = DiffusionDenoiser(4, hidden_width=64, time_embed_width=8)
    center_a = torch.tensor([4.0, 4.0, 0.0, 0.0])
    center_b = torch.tensor([-4.0, 0.0, 4.0, 0.0])
    opt = torch.optim.Adam(net.parameters(), lr=5e-3)
    gen = torch.Generator().manual_seed(0)
    for _ in range(600):
        which = torch.randint(0, 2, (64,), generator=gen)
        centers = torch.where(which[:, None] == 0, center_a, center_b)
        x0 = centers + 0.3 * torch.randn(64, 4, generator=gen)
        opt.zero_grad()
        loss = diffusion_loss(x0, centers, net, sched, generator=gen)
        loss.backward()
        opt.step()

    sample_gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        x_t = torch.randn(200, 4, generator=sample_gen)
        aug_a = sample_augmentation(x_t, center_a.repeat(200, 1), net, sched, sample_gen)
        x_t = torch.randn(200, 4, generator=sample_gen)
        aug_b = sample_augmentation(x_t, center_b.repeat(200, 1), net, sched, sample_gen)
    dist_aa = float((aug_a - center_a).norm(dim=1).mean())
    dist_ab = float((aug_a - center_b).norm(dim=1).mean())
    dist_bb = float((aug_b - center_b).norm(dim=1).mean())
    dist_ba = float((aug_b - center_a).norm(dim=1).mean())
    assert dist_aa < dist_ab
    assert dist_bb < dist_ba


def test_memorizing_denoiser_improves_reconstruction():
    # single fixed target: reconstruction error should shrink across checkpoints
    torch.manual_seed(7)
    sched = make_schedule(10)
    net = DiffusionDenoiser(6, hidden_width=32, time_embed_width=8)
    x0 = torch.randn(1, 6)
    s = torch.zeros(1, 6)
    opt = torch.optim.Adam(net.parameters(), lr=1e-2)
    gen = torch.Generator().manual_seed(0)

    def recon_error():
        errs = []
        sample_gen = torch.Generator().manual_seed(42)
        for _ in range(64):
            x_t = torch.randn(1, 6, generator=sample_gen)
            with torch.no_grad():
                out = sample_augmentation(x_t, s, net, sched, generator=sample_gen)
            errs.append(float((out - x0).norm()))
        return float(np.mean(errs))

    checkpoints = [recon_error()]
    for phase in range(2):
        for _ in range(400):
            opt.zero_grad()
            loss = diffusion_loss(x0.repeat(32, 1), s.repeat(32, 1), net, sched, generator=gen)
            loss.backward()
            opt.step()
        checkpoints.append(recon_error())
    assert checkpoints[2] < checkpoints[1] < checkpoints[0]
