from __future__ import annotations

import numpy as np
import pytest

from dualmix import autodiff as ad
from dualmix.encoder import EncoderParams, encode, encode_plain
from dualmix.errors import ShapeError

from conftest import central_difference, relative_error


def _params(W_star, W_deg) -> EncoderParams:
    return EncoderParams(W_star=ad.parameter(np.asarray(W_star, float)), W_deg=ad.parameter(np.asarray(W_deg, float)))


def _dense_oracle(P, degrees, W_star, W_deg):
    """Straight-line reference: one node at a time, no shared helpers."""
    n = P.shape[0]
    H = P @ W_star
    scores = np.empty(n)
    for i in range(n):
        kappa = P[i] @ W_deg[:, 0]
        scores[i] = 1.0 / (1.0 + np.exp(-np.log(degrees[i]) * kappa))
    weights = np.exp(scores - scores.max())
    beta = weights / weights.sum()
    return H, beta, beta[:, None] * H


def test_matches_dense_oracle(rng):
    for _ in range(20):
        P = rng.standard_normal((6, 5))
        degrees = rng.integers(1, 6, size=6).astype(float)
        W_star, W_deg = rng.standard_normal((5, 3)), rng.standard_normal((5, 1))
        out = encode(P, degrees, _params(W_star, W_deg))
        H, beta, X = _dense_oracle(P, degrees, W_star, W_deg)
        np.testing.assert_allclose(out.H.value, H, rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.beta.value[:, 0], beta, rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.X.value, X, rtol=0, atol=1e-12)


def test_identical_nodes_get_uniform_weights(rng):
    P = np.tile(rng.standard_normal(4), (7, 1))
    out = encode(P, np.full(7, 3.0), EncoderParams.initialize(4, 5, rng))
    np.testing.assert_allclose(out.beta.value, 1 / 7, rtol=0, atol=1e-15)


def test_unit_degree_gives_zero_centrality(rng):
    P = rng.standard_normal((4, 3)) * 10
    degrees = np.array([1.0, 2.0, 1.0, 5.0])
    out = encode(P, degrees, EncoderParams.initialize(3, 2, rng))
    assert out.alpha[0, 0] == 0.0 and out.alpha[2, 0] == 0.0
    assert out.alpha[1, 0] > 0
    scores = ad.sigmoid(ad.multiply(ad.constant(out.alpha), out.kappa)).value
    assert scores[0, 0] == 0.5 and scores[2, 0] == 0.5


def test_weights_sum_to_one(rng):
    for _ in range(50):
        n = int(rng.integers(1, 40))
        P = rng.standard_normal((n, 6)) * rng.uniform(0.1, 50)
        degrees = rng.integers(1, 30, size=n).astype(float)
        beta = encode(P, degrees, EncoderParams.initialize(6, 16, rng)).beta.value
        assert abs(beta.sum() - 1.0) <= 1e-12
        assert np.all(beta > 0)


def test_refined_rows_are_weighted_hidden_rows(rng):
    out = encode(rng.standard_normal((9, 4)), rng.integers(1, 5, 9), EncoderParams.initialize(4, 3, rng))
    np.testing.assert_array_equal(out.X.value, out.beta.value * out.H.value)


def test_gradients_through_encoder(rng):
    P = rng.standard_normal((6, 4))
    degrees = rng.integers(1, 6, size=6).astype(float)
    params = EncoderParams.initialize(4, 3, rng)
    weights = rng.standard_normal((6, 3))

    def loss():
        return ad.total(ad.multiply(encode(P, degrees, params).X, ad.constant(weights)))

    grads = ad.gradients(loss(), params.tensors())
    for p in params.tensors():
        numeric = central_difference(lambda: loss().value[0, 0], p.value)
        assert relative_error(grads[p], numeric) < 1e-5


def test_hidden_head_is_linear_in_features(rng):
    P = rng.standard_normal((5, 4))
    params = EncoderParams.initialize(4, 3, rng)
    H = encode(P, np.ones(5), params).H.value
    H2 = encode(2.0 * P, np.ones(5), params).H.value
    np.testing.assert_array_equal(H2, 2.0 * H)


def test_plain_identity_and_zero(rng):
    P = rng.standard_normal((5, 4))
    np.testing.assert_array_equal(encode_plain(P, _params(np.eye(4), np.zeros((4, 1)))).value, P)
    np.testing.assert_array_equal(encode_plain(P, _params(np.zeros((4, 3)), np.zeros((4, 1)))).value, 0.0)


def test_plain_matches_refined_hidden(rng):
    P = rng.standard_normal((8, 4))
    params = EncoderParams.initialize(4, 6, rng)
    np.testing.assert_array_equal(encode_plain(P, params).value, encode(P, np.ones(8) * 2, params).H.value)


def test_initialization_bounds(rng):
    params = EncoderParams.initialize(25, 16, rng)
    assert params.W_star.shape == (25, 16) and params.W_deg.shape == (25, 1)
    assert np.abs(params.W_star.value).max() <= 0.2
    assert np.abs(params.W_deg.value).max() <= 0.2


def test_shape_errors(rng):
    params = EncoderParams.initialize(4, 3, rng)
    with pytest.raises(ShapeError):
        encode(rng.standard_normal((5, 4)), np.ones(4), params)
    with pytest.raises(ShapeError):
        encode(rng.standard_normal((5, 3)), np.ones(5), params)
    with pytest.raises(ShapeError):
        encode_plain(rng.standard_normal((5, 3)), params)
    with pytest.raises(ShapeError):
        EncoderParams.initialize(4, 0, rng)
