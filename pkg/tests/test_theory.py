from __future__ import annotations

import math

import numpy as np
import pytest

from dualmix import theory as th
from dualmix.episodes import Episode, SeedStream
from dualmix.errors import ContractError, ParameterError, ShapeError

from conftest import binary_instance


# --- binary loss and regularizer -------------------------------------------------


def test_binary_loss_zero_theta(rng):
    q, c1, c2, _ = binary_instance(rng, m=7)
    assert th.binary_loss(q, c1, c2, np.zeros(4)) == 3.5


def test_binary_loss_at_midpoint(rng):
    _, c1, c2, theta = binary_instance(rng)
    mid = 0.5 * (c1 + c2)
    assert th.binary_loss(mid[None, :], c1, c2, theta) == 0.5


def test_binary_loss_matches_formula(rng):
    for _ in range(20):
        q, c1, c2, theta = binary_instance(rng)
        expect = sum(1.0 / (1.0 + math.exp(float(np.dot(x - (c1 + c2) / 2, theta)))) for x in q)
        assert abs(th.binary_loss(q, c1, c2, theta) - expect) < 1e-12


def test_binary_loss_shape_error(rng):
    q, c1, c2, theta = binary_instance(rng)
    with pytest.raises(ShapeError):
        th.binary_loss(q, c1[:3], c2, theta)


def test_regularizer_vanishes(rng):
    q, c1, c2, theta = binary_instance(rng)
    task = th.BinaryTask(q, c1, c2)
    moments = th.EmbeddingMoments.from_embeddings(q)
    assert th.regularizer_M([task], np.zeros(4), moments) == 0.0
    flat = th.EmbeddingMoments.from_embeddings(np.ones((5, 4)))
    assert th.regularizer_M([task], theta, flat) == 0.0


def test_regularizer_matches_formula(rng):
    tasks = [th.BinaryTask(*binary_instance(rng)[:3]) for _ in range(3)]
    theta = rng.standard_normal(4)
    X = np.vstack([t.queries for t in tasks])
    moments = th.EmbeddingMoments.from_embeddings(X)
    sigma = (X - X.mean(0)).T @ (X - X.mean(0)) / X.shape[0]
    terms = []
    for t in tasks:
        for x in t.queries:
            P = float(np.dot(x - (t.C1 + t.C2) / 2, theta))
            phi = math.exp(P) / (1 + math.exp(P))
            terms.append(phi * (phi - 0.5) / (2 * (1 + math.exp(P))))
    expect = np.mean(terms) * float(theta @ sigma @ theta)
    assert abs(th.regularizer_M(tasks, theta, moments) - expect) < 1e-12


# --- moments ---------------------------------------------------------------------


def test_moments_are_centered_psd(rng):
    X = rng.standard_normal((30, 5)) + 7.0
    mo = th.EmbeddingMoments.from_embeddings(X)
    assert np.linalg.norm(mo.mean) <= 1e-10
    assert np.linalg.eigvalsh(mo.sigma).min() >= -1e-10
    assert mo.rank == 5
    np.testing.assert_allclose(mo.sigma, np.cov(X.T, bias=True), rtol=0, atol=1e-12)


def test_rank_of_low_rank_embeddings(rng):
    X = rng.standard_normal((40, 2)) @ rng.standard_normal((2, 6))
    assert th.EmbeddingMoments.from_embeddings(X).rank == 2


def test_nu_is_quadratic_form(rng):
    mo = th.EmbeddingMoments.from_embeddings(rng.standard_normal((20, 3)))
    theta = rng.standard_normal(3)
    assert abs(mo.nu(theta) - theta @ mo.sigma @ theta) < 1e-12
    Theta = rng.standard_normal((3, 3))
    assert abs(mo.nu(Theta) - max(Theta[:, c] @ mo.sigma @ Theta[:, c] for c in range(3))) < 1e-12
    assert mo.nu(np.zeros(3)) == 0.0


def test_pinv_sqrt_inverts_on_range(rng):
    X = rng.standard_normal((50, 2)) @ rng.standard_normal((2, 4))
    mo = th.EmbeddingMoments.from_embeddings(X)
    R = mo.pinv_sqrt()
    np.testing.assert_allclose(R @ mo.sigma @ R, np.linalg.pinv(mo.sigma) @ mo.sigma, atol=1e-8)


# --- lambda law ------------------------------------------------------------------


def test_lambda_bar_examples():
    assert th.lambda_bar(0.5, 0.5) == 0.75
    assert abs(th.lambda_bar(1.0, 1.0) - 2 / 3) < 1e-15
    with pytest.raises(ParameterError):
        th.lambda_bar(0.0, 1.0)


@pytest.mark.parametrize("eta,gamma", [(0.5, 0.5), (1.0, 1.0), (2.0, 0.7)])
def test_lambda_bar_monte_carlo(eta, gamma):
    draws = th.sample_lambda_mixture(eta, gamma, 100_000, SeedStream(4))
    assert abs(draws.mean() - th.lambda_bar(eta, gamma)) < 0.01
    assert 0 < th.lambda_bar(eta, gamma) < 1


# --- Taylor remainder ------------------------------------------------------------


def test_taylor_quadratic_is_exact(rng):
    A = rng.standard_normal((4, 4))
    A = A @ A.T
    b = rng.standard_normal(4)
    res = th.taylor_check(lambda x: 0.5 * x @ A @ x + b @ x, rng.standard_normal(4), rng.standard_normal(4))
    assert np.all(res.residuals < 1e-10)


def test_taylor_linear_is_zero(rng):
    b = rng.standard_normal(4)
    res = th.taylor_check(lambda x: float(b @ x), rng.standard_normal(4), rng.standard_normal(4))
    assert np.all(res.residuals < 1e-12)


def test_taylor_slope_on_binary_loss():
    rng = np.random.default_rng(8)
    for _ in range(10):
        q, c1, c2, theta = binary_instance(rng)
        res = th.taylor_check(lambda t: th.binary_loss(q, c1, c2, t), theta, rng.standard_normal(4))
        assert res.slope >= 2.5


def test_taylor_cubic_slope_is_three():
    res = th.taylor_check(lambda x: float(np.sum(x**3)), np.zeros(3), np.ones(3))
    assert abs(res.slope - 3.0) < 0.05


def test_taylor_argument_errors(rng):
    with pytest.raises(ParameterError):
        th.taylor_check(lambda x: 0.0, np.zeros(2), np.zeros(2))
    with pytest.raises(ParameterError):
        th.taylor_check(lambda x: 0.0, np.zeros(2), np.ones(2), scales=[0.1, 0.05, 0.025])
    with pytest.raises(ParameterError):
        th.taylor_check(lambda x: 0.0, np.zeros(2), np.ones(2), scales=[0.1, 0.05, 0.01, 0.001])
    with pytest.raises(ShapeError):
        th.taylor_check(lambda x: 0.0, np.zeros(2), np.ones(3))


# --- Rademacher ------------------------------------------------------------------


def test_rademacher_trivial_cases(rng):
    assert th.rademacher_mc(np.zeros((10, 3)), 1.0, 100, SeedStream(0)).estimate == 0.0
    assert th.rademacher_mc(rng.standard_normal((10, 3)), 0.0, 100, SeedStream(0)).estimate == 0.0
    with pytest.raises(ParameterError):
        th.rademacher_mc(rng.standard_normal((10, 3)), -1.0, 100, SeedStream(0))


def test_closed_form_supremum_is_attained_and_never_exceeded(rng):
    X = rng.standard_normal((30, 4)) @ rng.standard_normal((4, 4))
    mo = th.EmbeddingMoments.from_embeddings(X)
    Xc = X - mo.offset
    nu = 2.0
    sigma_signs = rng.choice([-1.0, 1.0], size=30)
    v = sigma_signs @ Xc
    closed = math.sqrt(nu) / 30 * np.linalg.norm(mo.pinv_sqrt() @ v)
    # maximizer from the Lagrangian: theta* proportional to Sigma^+ v
    pinv = np.linalg.pinv(mo.sigma)
    theta_star = math.sqrt(nu) * pinv @ v / math.sqrt(v @ pinv @ v)
    assert abs(theta_star @ mo.sigma @ theta_star - nu) < 1e-9
    assert abs(theta_star @ v / 30 - closed) < 1e-10
    for _ in range(2000):
        theta = rng.standard_normal(4)
        theta *= math.sqrt(nu / (theta @ mo.sigma @ theta))
        assert theta @ v / 30 <= closed + 1e-12


def test_rademacher_below_bound_on_gaussian_embeddings():
    rng = np.random.default_rng(0)
    for _ in range(5):
        X = rng.standard_normal((50, 6))
        est = th.rademacher_mc(X, 1.5, 2000, rng)
        assert est.estimate <= est.bound + 3 * est.stderr
        assert est.rank == 6 and est.n_samples == 50


def test_rademacher_is_deterministic(rng):
    X = rng.standard_normal((20, 3))
    a = th.rademacher_mc(X, 1.0, 200, SeedStream(6))
    b = th.rademacher_mc(X, 1.0, 200, SeedStream(6))
    assert a == b


# --- bounds ----------------------------------------------------------------------


def test_theorem1_reference_value():
    assert abs(th.theorem1_bound(1.0, 1, 25, 10, 0.05) - 3.135724) < 1e-6


def test_theorem1_without_complexity():
    assert abs(th.theorem1_bound(0.0, 3, 40, 40, 0.1) - 6 * math.sqrt(math.log(20) / 80)) < 1e-12


def test_theorem2_examples():
    assert th.theorem2_bound(0.0, 4, 10, 20, 1.0) == 0.0
    a = th.theorem2_bound(1.3, 2, 49, 49, 0.1)
    assert abs(a - 2 * (2 * math.sqrt(2.6) + math.sqrt(math.log(10) / 2)) / 7) < 1e-12
    expect = (2 * math.sqrt(2) + math.sqrt(math.log(20) / 2)) * 0.3
    assert abs(th.theorem2_bound(1.0, 2, 100, 25, 0.05) - expect) < 1e-12


def test_bounds_monotone_over_grids():
    counts = [1, 2, 5, 10, 50, 200]
    nus = [0.0, 0.1, 1.0, 4.0]
    for nu in nus:
        for rank in (0, 1, 3):
            for a in counts:
                for b in counts:
                    t1 = th.theorem1_bound(nu, rank, a, b, 0.05)
                    t2 = th.theorem2_bound(nu, rank, a, b, 0.05)
                    assert t1 >= 0 and t2 >= 0
                    if a < counts[-1]:
                        nxt = counts[counts.index(a) + 1]
                        assert th.theorem1_bound(nu, rank, nxt, b, 0.05) < t1
                        assert th.theorem2_bound(nu, rank, nxt, b, 0.05) < t2
                    if b < counts[-1]:
                        nxt = counts[counts.index(b) + 1]
                        assert th.theorem1_bound(nu, rank, a, nxt, 0.05) < t1
                        assert th.theorem2_bound(nu, rank, a, nxt, 0.05) < t2
                    if nu < nus[-1]:
                        nxt = nus[nus.index(nu) + 1]
                        assert th.theorem1_bound(nxt, rank, a, b, 0.05) >= t1
                        assert th.theorem2_bound(nxt, rank, a, b, 0.05) >= t2


@pytest.mark.parametrize(
    "call",
    [
        lambda: th.theorem1_bound(-1.0, 1, 10, 10, 0.05),
        lambda: th.theorem1_bound(1.0, 1, 0, 10, 0.05),
        lambda: th.theorem1_bound(1.0, 1, 10, 10, 1.0),
        lambda: th.theorem2_bound(1.0, 1, 10, 0, 0.05),
        lambda: th.theorem2_bound(1.0, 1, 10, 10, 0.0),
    ],
)
def test_bound_input_errors(call):
    with pytest.raises(ParameterError):
        call()


# --- gap -------------------------------------------------------------------------


def test_gap_point():
    labels = np.repeat([0, 1], 4)
    Z = np.array([[0.0], [0.1], [0.2], [0.3], [5.0], [5.1], [5.2], [5.3]])
    ep = Episode(((0, 0), (4, 1)), ((1, 0), (2, 0), (5, 1), (6, 1)), (0, 1), 1, 2)
    point = th.generalization_gap(Z, [ep], [ep], epoch=3)
    assert point.train_acc == 1.0 and point.gap == 0.0 and point.epoch == 3
    assert labels.size == Z.shape[0]
    with pytest.raises(ContractError):
        th.generalization_gap(Z, [], [ep])


def test_bound_report_rejects_negative():
    with pytest.raises(ContractError):
        th.BoundReport(-1.0, 0.0, 0.0, 0.0, 0, 1, 1, 1, 0.05, 0.0, 0.0, 0.0, 1)
