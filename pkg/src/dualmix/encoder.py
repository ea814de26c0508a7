"""Linear SGC head with degree-prior reweighting.

Given propagated features ``P`` (n x d):

    H     = P @ W_star                       hidden vectors, n x h
    kappa = P @ W_deg                        interaction weights, n x 1
    alpha = ln(degree incl. self-loop)       node centralities, n x 1
    beta  = softmax_nodes(sigmoid(alpha * kappa))
    X     = beta * H                         row-wise scaling

The softmax runs over all graph nodes at once, so ``beta`` sums to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dualmix import autodiff as ad
from dualmix.errors import ShapeError
from dualmix.graph import PropagatedFeatures


@dataclass
class EncoderParams:
    W_star: ad.Tensor
    W_deg: ad.Tensor

    @classmethod
    def initialize(cls, n_features: int, hidden: int = 16, rng: np.random.Generator | None = None) -> "EncoderParams":
        """Uniform fan-in initialization in ``[-1/sqrt(d), 1/sqrt(d)]``."""
        if hidden < 1:
            raise ShapeError(f"hidden width must be >= 1, got {hidden}")
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(n_features)
        return cls(
            W_star=ad.parameter(rng.uniform(-bound, bound, size=(n_features, hidden)), name="W_star"),
            W_deg=ad.parameter(rng.uniform(-bound, bound, size=(n_features, 1)), name="W_deg"),
        )

    @property
    def hidden(self) -> int:
        return self.W_star.shape[1]

    @property
    def n_features(self) -> int:
        return self.W_star.shape[0]

    def tensors(self) -> list[ad.Tensor]:
        return [self.W_star, self.W_deg]


@dataclass
class RefinedEmbeddings:
    H: ad.Tensor
    kappa: ad.Tensor
    alpha: np.ndarray
    beta: ad.Tensor
    X: ad.Tensor


def _features(P) -> np.ndarray:
    return P.values if isinstance(P, PropagatedFeatures) else np.asarray(P, dtype=np.float64)


def encode(P: PropagatedFeatures | np.ndarray, degrees: np.ndarray, params: EncoderParams) -> RefinedEmbeddings:
    feats = _features(P)
    degrees = np.asarray(degrees, dtype=np.float64).reshape(-1, 1)
    if feats.shape[0] != degrees.shape[0]:
        raise ShapeError(f"{feats.shape[0]} feature rows but {degrees.shape[0]} degrees")
    if feats.shape[1] != params.n_features:
        raise ShapeError(f"features have width {feats.shape[1]}, encoder expects {params.n_features}")
    Pt = ad.constant(feats)
    H = ad.matmul(Pt, params.W_star)
    kappa = ad.matmul(Pt, params.W_deg)
    alpha = np.log(degrees)
    scores = ad.sigmoid(ad.multiply(ad.constant(alpha), kappa))
    beta = ad.softmax(scores, axis=0)
    X = ad.row_multiply(H, beta)
    return RefinedEmbeddings(H=H, kappa=kappa, alpha=alpha, beta=beta, X=X)


def encode_plain(P: PropagatedFeatures | np.ndarray, params: EncoderParams) -> ad.Tensor:
    """Vanilla SGC output ``H = P @ W_star`` with no degree refinement."""
    feats = _features(P)
    if feats.shape[1] != params.n_features:
        raise ShapeError(f"features have width {feats.shape[1]}, encoder expects {params.n_features}")
    return ad.matmul(ad.constant(feats), params.W_star)
