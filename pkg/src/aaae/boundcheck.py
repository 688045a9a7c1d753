"""Numerical check of the cross-entropy bound on tractable distributions.

For four distributions over a shared space, playing the roles of the data
distribution ``p``, the decoder ``q``, the encoder ``p_theta`` and the
approximator ``p_phi``, the checked inequality is::

    H(p_phi, p_theta) <= KL(q || p) + KL(p_phi || p_theta) + H(p_phi)

Two families are supported: categorical over ``K`` outcomes and diagonal
Gaussians in ``d`` dimensions.  Both sides have closed forms; for Gaussians
the left side is also estimated by Monte Carlo, which gives a check that does
not share code with the closed-form path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from aaae.errors import ConfigurationError

EXACT_TOL = 1e-9
MC_SIGMAS = 3.0
ROLE_NAMES = ("data", "decoder", "encoder", "approximator")


@dataclass
class Categorical:
    """Rows of ``probs`` are distributions over K outcomes: (data, decoder, encoder, approximator)."""

    probs: np.ndarray  # (..., 4, K)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape[-2] != 4:
            raise ConfigurationError("categorical family needs 4 role distributions")
        if (self.probs < 0).any() or not np.allclose(self.probs.sum(-1), 1.0, atol=1e-12, rtol=0):
            raise ConfigurationError("categorical probabilities must be non-negative and sum to 1")

    def role(self, i):
        return self.probs[..., i, :]


@dataclass
class DiagGaussian:
    """``means`` and ``variances`` are (..., 4, d) in role order."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.means.shape != self.variances.shape or self.means.shape[-2] != 4:
            raise ConfigurationError("gaussian family needs matching (4, d) means and variances")
        if (self.variances <= 0).any():
            raise ConfigurationError("variances must be positive")

    def role(self, i):
        return self.means[..., i, :], self.variances[..., i, :]


# -- categorical ---------------------------------------------------------

def _xlogy_neg(p, q):
    """``-sum p log q`` with 0 log 0 = 0 and +inf where p > 0 = q."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(np.where(p > 0, q, 1.0)), 0.0)
    return -t.sum(-1)


def cat_cross_entropy(p, q):
    return _xlogy_neg(np.asarray(p), np.asarray(q))


def cat_entropy(p):
    return _xlogy_neg(np.asarray(p), np.asarray(p))


def cat_kl(p, q):
    return cat_cross_entropy(p, q) - cat_entropy(p)


# -- diagonal gaussian ---------------------------------------------------

def gauss_cross_entropy(m1, v1, m2, v2):
    """``-E_{N(m1, v1)} log N(m2, v2)``, summed over dimensions."""
    return (0.5 * np.log(2 * np.pi * v2) + (v1 + (m1 - m2) ** 2) / (2 * v2)).sum(-1)


def gauss_entropy(m, v):
    return (0.5 * np.log(2 * np.pi * np.e * v)).sum(-1)


def gauss_kl(m1, v1, m2, v2):
    return (0.5 * (np.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / v2 - 1)).sum(-1)


def gauss_cross_entropy_mc(m1, v1, m2, v2, n, rng):
    """Monte-Carlo estimate of the cross entropy and its standard error."""
    m1, v1, m2, v2 = (np.asarray(a, dtype=np.float64) for a in (m1, v1, m2, v2))
    x = m1[..., None, :] + np.sqrt(v1)[..., None, :] * rng.standard_normal(m1.shape[:-1] + (n, m1.shape[-1]))
    logq = -0.5 * (np.log(2 * np.pi * v2)[..., None, :] + (x - m2[..., None, :]) ** 2 / v2[..., None, :])
    vals = -logq.sum(-1)
    return vals.mean(-1), vals.std(-1, ddof=1) / math.sqrt(n)


# -- both sides ------------------------------------------------------------

def cross_entropy_lhs(family) -> np.ndarray:
    """``H(p_phi, p_theta)``; +inf where the approximator has mass the encoder lacks."""
    if isinstance(family, Categorical):
        return cat_cross_entropy(family.role(3), family.role(2))
    return gauss_cross_entropy(*family.role(3), *family.role(2))


def bound_rhs(family) -> dict:
    """Right-hand side and its three terms."""
    if isinstance(family, Categorical):
        kl_x = cat_kl(family.role(1), family.role(0))
        kl_c = cat_kl(family.role(3), family.role(2))
        ent = cat_entropy(family.role(3))
    else:
        kl_x = gauss_kl(*family.role(1), *family.role(0))
        kl_c = gauss_kl(*family.role(3), *family.role(2))
        ent = gauss_entropy(*family.role(3))
    return {"kl_decoder_data": kl_x, "kl_approx_encoder": kl_c, "approx_entropy": ent,
            "rhs": kl_x + kl_c + ent}


def random_categorical(rng, n, k_max=8, k=None) -> list[Categorical]:
    """Dirichlet(1) role distributions; K uniform in [2, k_max] unless fixed."""
    out = []
    for _ in range(n):
        kk = k if k is not None else int(rng.integers(2, k_max + 1))
        out.append(Categorical(rng.dirichlet(np.ones(kk), size=4)))
    return out


def random_gaussian(rng, n, d_max=4, d=None) -> list[DiagGaussian]:
    """Means uniform in [-2, 2], log-variances uniform in [-1, 1]."""
    out = []
    for _ in range(n):
        dd = d if d is not None else int(rng.integers(1, d_max + 1))
        out.append(DiagGaussian(rng.uniform(-2, 2, (4, dd)), np.exp(rng.uniform(-1, 1, (4, dd)))))
    return out


@dataclass
class BoundReport:
    family: str
    trials: int
    violations: int
    min_slack: float
    min_slack_mc: float | None = None
    mc_violations: int = 0
    tolerance: float = EXACT_TOL
    offending: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.mc_violations == 0

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items()}
        d["ok"] = self.ok
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _family_payload(fam):
    if isinstance(fam, Categorical):
        return {"probs": fam.probs.tolist()}
    return {"means": fam.means.tolist(), "variances": fam.variances.tolist()}


def verify_bound(family: str = "categorical", n_trials: int = 10_000, seed: int = 0,
                 k_max: int = 8, d_max: int = 4, mc_samples: int = 2_000) -> BoundReport:
    """Check LHS <= RHS on ``n_trials`` random instances.

    Exact terms use an absolute tolerance of 1e-9; Monte-Carlo estimates of
    the left side (Gaussian only) are allowed 3 standard errors.
    """
    if n_trials < 1:
        raise ConfigurationError("n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    if family == "categorical":
        fams = random_categorical(rng, n_trials, k_max)
    elif family == "gaussian":
        fams = random_gaussian(rng, n_trials, d_max)
    else:
        raise ConfigurationError(f"unknown family {family!r}")

    report = BoundReport(family, n_trials, 0, math.inf)
    if family == "gaussian":
        report.min_slack_mc = math.inf
    for fam in fams:
        lhs = float(cross_entropy_lhs(fam))
        rhs = float(bound_rhs(fam)["rhs"])
        slack = rhs - lhs
        report.min_slack = min(report.min_slack, slack)
        bad = not slack >= -EXACT_TOL
        if family == "gaussian":
            est, se = gauss_cross_entropy_mc(*fam.role(3), *fam.role(2), mc_samples, rng)
            mc_slack = rhs - float(est)
            report.min_slack_mc = min(report.min_slack_mc, mc_slack)
            if not mc_slack >= -MC_SIGMAS * float(se):
                report.mc_violations += 1
                bad = True
        if bad:
            report.violations += not slack >= -EXACT_TOL
            report.offending.append({**_family_payload(fam), "lhs": lhs, "rhs": rhs})
    return report
