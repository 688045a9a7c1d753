"""Loss terms for the autoencoder/discriminator pair and the latent critic pair.

All functions return scalar tensors so callers can differentiate them.
Discriminator outputs are raw scores; the sigmoid only appears here.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch

from aaae.errors import ConfigurationError, InputError, NumericalError

SIGMOID_EPS = 1e-7

# which term lambda1 scales in the autoencoder loss
WEIGHT_ADVERSARIAL = "adversarial"
WEIGHT_RECONSTRUCTION = "reconstruction"
ADV_NONSATURATING = "nonsaturating"
ADV_LITERAL = "literal"


@dataclass(frozen=True)
class Hyperparams:
    """Loss weights.

    ``lambda1_weights`` selects the term ``lambda1`` multiplies:
    ``"adversarial"`` gives ``recon + lambda1 * adv`` (default),
    ``"reconstruction"`` gives ``adv + lambda1 * recon``.
    ``generator_adv`` picks the adversarial term for the autoencoder:
    non-saturating ``-log sigmoid(D(x_rec))`` or the literal mean ``D(x_real)``.
    """

    lambda1: float = 0.001
    lambda2: float = 10.0
    lambda1_weights: str = WEIGHT_ADVERSARIAL
    generator_adv: str = ADV_NONSATURATING

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ConfigurationError("lambda1 and lambda2 must be positive")
        if self.lambda1_weights not in (WEIGHT_ADVERSARIAL, WEIGHT_RECONSTRUCTION):
            raise ConfigurationError(f"unknown lambda1_weights {self.lambda1_weights!r}")
        if self.generator_adv not in (ADV_NONSATURATING, ADV_LITERAL):
            raise ConfigurationError(f"unknown generator_adv {self.generator_adv!r}")


@dataclass
class LossReport:
    reconstruction: float = 0.0
    image_adv: float = 0.0
    image_disc: float = 0.0
    critic: float = 0.0
    gradient_penalty: float = 0.0
    approximator: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_dict().values())

    @classmethod
    def mean(cls, reports) -> LossReport:
        reports = list(reports)
        if not reports:
            return cls()
        return cls(**{
            f.name: sum(getattr(r, f.name) for r in reports) / len(reports) for f in fields(cls)
        })


def _per_sample_mean(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], -1).mean(dim=1)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise InputError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _finite(value: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise NumericalError(f"non-finite {what}: {value.detach().tolist()}")
    return value


def log_sigmoid_clamped(scores: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.sigmoid(scores).clamp(SIGMOID_EPS, 1 - SIGMOID_EPS))


def log_one_minus_sigmoid_clamped(scores: torch.Tensor) -> torch.Tensor:
    return torch.log(1 - torch.sigmoid(scores).clamp(SIGMOID_EPS, 1 - SIGMOID_EPS))


def reconstruction_cost(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel error, averaged per image then over the batch."""
    _same_shape(x, x_hat, "reconstruction_cost")
    return _per_sample_mean((x - x_hat).abs()).mean()


def adversarial_term(model, x: torch.Tensor, x_rec: torch.Tensor, hp: Hyperparams) -> torch.Tensor:
    if hp.generator_adv == ADV_LITERAL:
        return model.discriminate_image(x).mean()
    return -log_sigmoid_clamped(model.discriminate_image(x_rec)).mean()


def combine_autoencoder_loss(recon: torch.Tensor, adv: torch.Tensor, hp: Hyperparams) -> torch.Tensor:
    if hp.lambda1_weights == WEIGHT_RECONSTRUCTION:
        return adv + hp.lambda1 * recon
    return recon + hp.lambda1 * adv


def autoencoder_generator_loss(x: torch.Tensor, hp: Hyperparams, model, return_parts=False):
    """Autoencoder objective: reconstruction plus patch-adversarial term.

    With ``return_parts`` the tuple ``(loss, recon, adv, x_rec)`` is returned
    so the caller can reuse the reconstructions.
    """
    x_rec = model.decode(model.encode(x))
    recon = reconstruction_cost(x, x_rec)
    adv = adversarial_term(model, x, x_rec, hp)
    loss = _finite(combine_autoencoder_loss(recon, adv, hp), "autoencoder loss")
    if return_parts:
        return loss, recon, adv, x_rec
    return loss


def image_discriminator_loss(x_real: torch.Tensor, x_fake: torch.Tensor, model) -> torch.Tensor:
    if x_real.shape[0] != x_fake.shape[0]:
        raise InputError("image_discriminator_loss: real and fake batch sizes differ")
    real = model.discriminate_image(x_real)
    fake = model.discriminate_image(x_fake.detach())
    per_sample = _per_sample_mean(log_sigmoid_clamped(real)) + _per_sample_mean(log_one_minus_sigmoid_clamped(fake))
    return -per_sample.mean()


def critic_gradient_norms(critic, c: torch.Tensor, create_graph=True) -> torch.Tensor:
    """Per-row L2 norm of d critic(c) / d c."""
    c = c.detach().clone().requires_grad_(True)
    out = critic(c)
    if not isinstance(out, torch.Tensor) or not out.requires_grad:
        raise ConfigurationError("critic output is not differentiable with respect to its input")
    (grad,) = torch.autograd.grad(out.sum(), c, create_graph=create_graph, allow_unused=True)
    if grad is None:
        return torch.zeros(c.shape[0], dtype=c.dtype)
    return grad.reshape(grad.shape[0], -1).norm(dim=1)


def _critic_fn(model):
    return model.discriminate_code if hasattr(model, "discriminate_code") else model


def gradient_penalty(model, c_g: torch.Tensor, hp: Hyperparams) -> torch.Tensor:
    """``lambda2 * mean((||grad_c D(c)||_2 - 1)^2)`` evaluated at ``c = c_g``.

    ``model`` may be an :class:`~aaae.model.AAAE` or any callable critic.
    """
    norms = critic_gradient_norms(_critic_fn(model), c_g)
    return hp.lambda2 * ((norms - 1.0) ** 2).mean()


def critic_loss(c_real: torch.Tensor, c_fake: torch.Tensor, model, hp: Hyperparams, return_parts=False):
    if c_real.shape[0] != c_fake.shape[0]:
        raise InputError("critic_loss: real and fake batch sizes differ")
    critic = _critic_fn(model)
    c_real, c_fake = c_real.detach(), c_fake.detach()
    wasserstein = (-critic(c_real) + critic(c_fake)).mean()
    gp = gradient_penalty(model, c_fake, hp)
    loss = wasserstein + gp
    if return_parts:
        return loss, gp
    return loss


def approximator_loss(c_fake: torch.Tensor, model) -> torch.Tensor:
    return -_critic_fn(model)(c_fake).mean()
