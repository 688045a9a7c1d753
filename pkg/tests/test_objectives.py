import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from aaae.errors import ConfigurationError, InputError, NumericalError
from aaae.model import init_params
from aaae.objectives import (
    Hyperparams,
    LossReport,
    approximator_loss,
    autoencoder_generator_loss,
    critic_gradient_norms,
    critic_loss,
    gradient_penalty,
    image_discriminator_loss,
    reconstruction_cost,
)

from conftest import tiny_image_spec

LITERAL = Hyperparams(lambda1_weights="reconstruction")


class StubModel:
    """Identity autoencoder with a constant patch discriminator."""

    def __init__(self, score=0.0, offset=0.0):
        self.score = score
        self.offset = offset

    def encode(self, x):
        return x

    def decode(self, c):
        return c + self.offset

    def discriminate_image(self, x):
        return torch.full((x.shape[0], 1, 2, 2), float(self.score), dtype=x.dtype)


def linear_critic(w, b=0.0):
    lin = nn.Linear(len(w), 1).double()
    with torch.no_grad():
        lin.weight.copy_(torch.as_tensor(w, dtype=torch.float64)[None])
        lin.bias.fill_(b)
    return lambda c: lin(c).reshape(-1)


def test_reconstruction_cost_examples():
    x = torch.rand(4, 3, 32, 32) * 2 - 1
    assert reconstruction_cost(x, x).item() == 0.0
    assert reconstruction_cost(x, x + 0.2).item() == pytest.approx(0.2, abs=1e-6)
    y = torch.zeros(1, 3, 32, 32)
    y2 = y.clone()
    y2[0, 1, 5, 7] = 1.0
    assert reconstruction_cost(y, y2).item() == pytest.approx(1 / 3072, rel=1e-6)
    with pytest.raises(InputError):
        reconstruction_cost(x, x[:, :1])


def test_generator_loss_at_uninformative_point():
    x = torch.rand(5, 3, 8, 8)
    loss = autoencoder_generator_loss(x, LITERAL, StubModel())
    assert loss.item() == pytest.approx(math.log(2), abs=1e-6)
    # default weighting scales the adversarial term instead
    loss = autoencoder_generator_loss(x, Hyperparams(), StubModel())
    assert loss.item() == pytest.approx(0.001 * math.log(2), abs=1e-9)


@pytest.mark.parametrize("weights", ["reconstruction", "adversarial"])
def test_lambda1_scales_exactly_one_term(weights):
    x = torch.rand(5, 3, 8, 8, dtype=torch.float64)
    model = StubModel(score=0.3, offset=0.25)
    parts = {}
    for lam in (0.001, 0.002):
        hp = Hyperparams(lambda1=lam, lambda1_weights=weights)
        loss, recon, adv, _ = autoencoder_generator_loss(x, hp, model, return_parts=True)
        parts[lam] = (loss.item(), recon.item(), adv.item())
        scaled, fixed = (recon, adv) if weights == "reconstruction" else (adv, recon)
        # decomposition audit: loss minus the unscaled term is lambda1 times the scaled term
        assert (loss - fixed).item() == pytest.approx(lam * scaled.item(), rel=1e-6)
    (l1, r1, a1), (l2, r2, a2) = parts[0.001], parts[0.002]
    scaled1 = r1 if weights == "reconstruction" else a1
    assert l2 - l1 == pytest.approx(0.001 * scaled1, rel=1e-5)
    assert r1 == pytest.approx(0.25, abs=1e-6)
    assert a1 == pytest.approx(-math.log(1 / (1 + math.exp(-0.3))), rel=1e-6)


def test_generator_loss_nan_is_numerical_error():
    x = torch.rand(2, 3, 8, 8)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericalError):
        autoencoder_generator_loss(x, Hyperparams(), StubModel())


def test_generator_loss_gradient_reaches_autoencoder_only():
    model = init_params(tiny_image_spec(), 0)
    x = torch.rand(4, 3, 32, 32) * 2 - 1
    autoencoder_generator_loss(x, Hyperparams(), model).backward()
    assert all(p.grad is not None for p in model.encoder.parameters())
    assert all(p.grad is not None for p in model.decoder.parameters())
    for name in ("approximator", "code_critic"):
        assert all(p.grad is None for p in getattr(model, name).parameters())


def test_image_discriminator_loss_examples():
    x, y = torch.rand(3, 3, 8, 8), torch.rand(3, 3, 8, 8)
    zero = StubModel(0.0)
    assert image_discriminator_loss(x, y, zero).item() == pytest.approx(2 * math.log(2), abs=1e-6)
    assert image_discriminator_loss(y, x, zero).item() == pytest.approx(image_discriminator_loss(x, y, zero).item())

    class Perfect:
        def discriminate_image(self, t):
            s = 1e4 if t is x else -1e4
            return torch.full((t.shape[0], 1, 2, 2), s)

    assert 0 <= image_discriminator_loss(x, y, Perfect()).item() < 1e-6
    with pytest.raises(InputError):
        image_discriminator_loss(x, y[:2], zero)


def test_image_discriminator_loss_nonnegative_on_model():
    model = init_params(tiny_image_spec(), 1)
    x = torch.rand(4, 3, 32, 32) * 2 - 1
    value = image_discriminator_loss(x, -x, model)
    assert value.item() >= 0 and math.isfinite(value.item())


def test_gradient_penalty_linear_critics():
    hp = Hyperparams(lambda2=10.0)
    c = torch.randn(16, 3, dtype=torch.float64)
    assert gradient_penalty(linear_critic([0.6, 0.8, 0.0]), c, hp).item() == pytest.approx(0.0, abs=1e-6)
    assert gradient_penalty(linear_critic([1.0, 2.0, 2.0]), c, hp).item() == pytest.approx(40.0, abs=1e-6)
    assert hp.lambda2 == 10.0 and Hyperparams().lambda1 == 0.001


def test_critic_loss_examples():
    hp = Hyperparams()
    c = torch.randn(8, 3, dtype=torch.float64)
    assert critic_loss(c, c, linear_critic([0.0, 1.0, 0.0]), hp).item() == pytest.approx(0.0, abs=1e-9)
    constant = linear_critic([0.0, 0.0, 0.0], b=5.0)
    assert critic_loss(c, c + 1, constant, hp).item() == pytest.approx(10.0, abs=1e-9)


def test_non_differentiable_critic_is_rejected():
    c = torch.randn(4, 3)
    with pytest.raises(ConfigurationError):
        gradient_penalty(lambda t: torch.ones(t.shape[0]), c, Hyperparams())


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.integers(0, 2**16))
def test_critic_loss_shift_invariance(b, seed):
    gen = torch.Generator().manual_seed(seed)
    net = nn.Sequential(nn.Linear(3, 8), nn.Tanh(), nn.Linear(8, 1)).double()
    c_real = torch.randn(6, 3, generator=gen, dtype=torch.float64)
    c_fake = torch.randn(6, 3, generator=gen, dtype=torch.float64)
    base = critic_loss(c_real, c_fake, lambda c: net(c).reshape(-1), Hyperparams()).item()
    shifted = critic_loss(c_real, c_fake, lambda c: net(c).reshape(-1) + b, Hyperparams()).item()
    assert shifted == pytest.approx(base, abs=1e-9)


def test_approximator_loss_examples():
    c = torch.randn(2, 3, dtype=torch.float64)
    assert approximator_loss(c, linear_critic([0, 0, 0], 5.0)).item() == pytest.approx(-5.0)
    assert approximator_loss(c, linear_critic([0, 0, 0], 0.0)).item() == 0.0
    scores = iter([torch.tensor([1.0, 3.0])])
    assert approximator_loss(c, lambda _: next(scores)).item() == pytest.approx(-2.0)


def finite_difference_norms(f, c, h=1e-4):
    """Central differences of a scalar-per-row function, one coordinate at a time."""
    c = c.detach().numpy()
    grads = np.zeros_like(c)
    for j in range(c.shape[1]):
        e = np.zeros(c.shape[1])
        e[j] = h
        up = f(torch.from_numpy(c + e)).detach().numpy()
        dn = f(torch.from_numpy(c - e)).detach().numpy()
        grads[:, j] = (up - dn) / (2 * h)
    return np.linalg.norm(grads, axis=1)


def test_gradient_norm_matches_finite_differences_small():
    gen = torch.Generator().manual_seed(0)
    net = nn.Sequential(nn.Linear(5, 12), nn.LeakyReLU(0.1), nn.Linear(12, 1)).double()
    c = torch.randn(10, 5, generator=gen, dtype=torch.float64)
    f = lambda t: net(t).reshape(-1)
    analytic = critic_gradient_norms(f, c).detach().numpy()
    fd = finite_difference_norms(f, c)
    np.testing.assert_allclose(analytic, fd, rtol=1e-3)


def test_losses_finite_for_large_codes_on_model():
    model = init_params(tiny_image_spec(), 2)
    c = torch.randn(6, 8)
    c = 1e3 * c / c.norm(dim=1, keepdim=True)
    hp = Hyperparams()
    values = [critic_loss(c, -c, model, hp), approximator_loss(c, model), gradient_penalty(model, c, hp)]
    assert all(torch.isfinite(v) for v in values)
    assert gradient_penalty(model, c, hp).item() >= 0


def test_hyperparams_validation():
    for bad in (dict(lambda1=0), dict(lambda2=-1), dict(lambda1_weights="x"), dict(generator_adv="y")):
        with pytest.raises(ConfigurationError):
            Hyperparams(**bad)


def test_loss_report_helpers():
    a = LossReport(1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    b = LossReport(3.0, 2.0, 1.0, 0.0, 1.0, 2.0)
    m = LossReport.mean([a, b])
    assert m.as_dict() == {"reconstruction": 2.0, "image_adv": 2.0, "image_disc": 2.0,
                           "critic": 2.0, "gradient_penalty": 3.0, "approximator": 4.0}
    assert m.is_finite()
    assert not LossReport(critic=float("inf")).is_finite()


def test_literal_generator_term_uses_real_scores():
    x = torch.rand(3, 3, 8, 8)
    hp = Hyperparams(generator_adv="literal", lambda1_weights="reconstruction")
    _, _, adv, _ = autoencoder_generator_loss(x, hp, StubModel(score=0.7), return_parts=True)
    assert adv.item() == pytest.approx(0.7)
