import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from aaae import boundcheck as B
from aaae.errors import ConfigurationError


def brute_cross_entropy(p, q):
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            if qi == 0:
                return math.inf
            total -= pi * math.log(qi)
    return total


def brute_kl(p, q):
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            total += pi * math.log(pi / qi)
    return total


def brute_sides(probs):
    data, dec, enc, approx = (list(map(float, r)) for r in probs)
    lhs = brute_cross_entropy(approx, enc)
    rhs = brute_kl(dec, data) + brute_kl(approx, enc) + brute_cross_entropy(approx, approx)
    return lhs, rhs


def test_categorical_matches_brute_force_oracle():
    rng = np.random.default_rng(1)
    for fam in B.random_categorical(rng, 500, k_max=8):
        lhs, rhs = brute_sides(fam.probs)
        assert abs(float(B.cross_entropy_lhs(fam)) - lhs) <= 1e-12
        assert abs(float(B.bound_rhs(fam)["rhs"]) - rhs) <= 1e-12


def test_categorical_examples():
    p = np.array([0.2, 0.3, 0.5])
    fam = B.Categorical(np.stack([p, p, p, p]))
    assert float(B.cross_entropy_lhs(fam)) == pytest.approx(-(p * np.log(p)).sum(), abs=1e-15)
    fam = B.Categorical([[0.5, 0.5], [0.5, 0.5], [0.5, 0.5], [1.0, 0.0]])
    assert float(B.cross_entropy_lhs(fam)) == pytest.approx(math.log(2), abs=1e-15)
    u = np.full(4, 0.25)
    terms = B.bound_rhs(B.Categorical(np.stack([u] * 4)))
    assert terms["kl_decoder_data"] == 0 and terms["kl_approx_encoder"] == 0


def test_support_mismatch_gives_infinity():
    fam = B.Categorical([[0.5, 0.5], [0.5, 0.5], [1.0, 0.0], [0.5, 0.5]])
    assert math.isinf(float(B.cross_entropy_lhs(fam)))
    assert math.isinf(float(B.bound_rhs(fam)["rhs"]))


def test_gaussian_closed_forms():
    mu = 1.7
    fam = B.DiagGaussian(np.array([[0.0]] * 3 + [[0.0]]), np.ones((4, 1)))
    fam.means[2, 0] = mu
    expected = 0.5 * math.log(2 * math.pi) + 0.5 + mu**2 / 2
    assert float(B.cross_entropy_lhs(fam)) == pytest.approx(expected, abs=1e-12)
    assert float(B.gauss_kl(np.array([0.0]), np.array([1.0]), np.array([1.0]), np.array([1.0]))) == 0.5


def test_gaussian_cross_entropy_against_quadrature():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m1, m2 = rng.uniform(-2, 2, 2)
        v1, v2 = np.exp(rng.uniform(-1, 1, 2))
        f = lambda x: -stats.norm.pdf(x, m1, math.sqrt(v1)) * stats.norm.logpdf(x, m2, math.sqrt(v2))
        quad, _ = integrate.quad(f, -30, 30)
        closed = float(B.gauss_cross_entropy(np.array([m1]), np.array([v1]), np.array([m2]), np.array([v2])))
        assert closed == pytest.approx(quad, abs=1e-8)


def test_monte_carlo_estimate_brackets_closed_form():
    rng = np.random.default_rng(5)
    m1, v1, m2, v2 = np.array([0.3, -1.0]), np.array([0.5, 2.0]), np.array([1.0, 0.0]), np.array([1.5, 0.7])
    est, se = B.gauss_cross_entropy_mc(m1, v1, m2, v2, 200_000, rng)
    assert abs(est - B.gauss_cross_entropy(m1, v1, m2, v2)) < 4 * se


def test_equality_case_has_zero_slack():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(6))
    q = rng.dirichlet(np.ones(6))
    fam = B.Categorical(np.stack([p, p, q, q]))
    terms = B.bound_rhs(fam)
    assert terms["rhs"] - float(B.cross_entropy_lhs(fam)) <= 1e-9
    assert terms["rhs"] == pytest.approx(-(q * np.log(q)).sum(), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_slack_is_nonnegative_and_vanishes_only_with_matched_data_roles(k, seed):
    rng = np.random.default_rng(seed)
    fam = B.random_categorical(rng, 1, k=k)[0]
    slack = float(B.bound_rhs(fam)["rhs"] - B.cross_entropy_lhs(fam))
    assert slack >= -1e-9
    # the two code-space terms add up to the left side, so the slack is exactly KL(decoder || data)
    assert slack == pytest.approx(brute_kl(fam.probs[1], fam.probs[0]), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_gaussian_slack_nonnegative(d, seed):
    fam = B.random_gaussian(np.random.default_rng(seed), 1, d=d)[0]
    assert float(B.bound_rhs(fam)["rhs"] - B.cross_entropy_lhs(fam)) >= -1e-9


def test_random_family_generators_respect_ranges():
    rng = np.random.default_rng(9)
    for fam in B.random_categorical(rng, 200, k_max=8):
        assert 2 <= fam.probs.shape[-1] <= 8
        np.testing.assert_allclose(fam.probs.sum(-1), 1.0, atol=1e-12)
    for fam in B.random_gaussian(rng, 200, d_max=4):
        assert 1 <= fam.means.shape[-1] <= 4
        assert np.all(np.abs(fam.means) <= 2)
        assert np.all((fam.variances >= math.exp(-1)) & (fam.variances <= math.exp(1)))


def test_verify_bound_small_runs():
    for family in ("categorical", "gaussian"):
        report = B.verify_bound(family, 200, seed=4)
        assert report.ok and report.violations == 0 and report.min_slack >= -1e-9
        assert json.loads(report.to_json())["trials"] == 200
    a = B.verify_bound("categorical", 50, seed=1)
    b = B.verify_bound("categorical", 50, seed=1)
    assert a.min_slack == b.min_slack


def test_violation_report_serializes_offending_instance(monkeypatch):
    real = B.bound_rhs

    def broken(fam):
        out = dict(real(fam))
        out["rhs"] = out["rhs"] - 100.0
        return out

    monkeypatch.setattr(B, "bound_rhs", broken)
    report = B.verify_bound("categorical", 5, seed=0)
    assert not report.ok and report.violations == 5
    payload = json.loads(report.to_json())
    assert len(payload["offending"]) == 5 and "probs" in payload["offending"][0]


def test_invalid_inputs():
    with pytest.raises(ConfigurationError):
        B.verify_bound("poisson", 10)
    with pytest.raises(ConfigurationError):
        B.verify_bound("categorical", 0)
    with pytest.raises(ConfigurationError):
        B.Categorical([[0.5, 0.6]] * 4)
    with pytest.raises(ConfigurationError):
        B.DiagGaussian(np.zeros((4, 2)), np.zeros((4, 2)))
