"""Numerical side of the generalization analysis.

Covers the binary simplified loss and its mixup-induced quadratic
regularizer, a finite-difference Taylor remainder check, a Monte-Carlo
estimate of the empirical Rademacher complexity of the constrained linear
class ``{x -> theta^T x : theta^T Sigma theta <= nu}``, and closed-form
evaluation of the two bounds.

Moments are computed on centered embeddings, so the mean term that appears
in the uncentered form of the task-level bound is zero and omitted.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from dualmix.episodes import Episode, SeedStream
from dualmix.errors import ContractError, ParameterError, ShapeError
from dualmix.mixup import sample_beta
from dualmix.protometa import score_episodes

PSD_TOLERANCE = 1e-10
RANK_RTOL = 1e-12


# --- moments -------------------------------------------------------------------


def numerical_rank(sigma: np.ndarray, n_samples: int) -> int:
    """Singular values above ``max(h, m) * s_max * 1e-12``."""
    s = np.linalg.svd(sigma, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > max(sigma.shape[0], n_samples) * s[0] * RANK_RTOL))


@dataclass(frozen=True)
class EmbeddingMoments:
    """Second moment ``(1/m) sum x x^T`` of (optionally centered) embeddings."""

    sigma: np.ndarray
    mean: np.ndarray  # mean of the rows the moment was computed from
    offset: np.ndarray  # mean removed by centering, zero if not centered
    rank: int
    n_samples: int

    @classmethod
    def from_embeddings(cls, X: np.ndarray, center: bool = True) -> "EmbeddingMoments":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ShapeError(f"need a non-empty m x h matrix, got shape {X.shape}")
        offset = X.mean(axis=0) if center else np.zeros(X.shape[1])
        Xc = X - offset
        m = Xc.shape[0]
        sigma = Xc.T @ Xc / m
        sigma = 0.5 * (sigma + sigma.T)
        min_eig = float(np.linalg.eigvalsh(sigma)[0])
        if min_eig < -PSD_TOLERANCE:
            raise ContractError(f"second moment is not positive semidefinite (min eigenvalue {min_eig:.3e})")
        return cls(sigma=sigma, mean=Xc.mean(axis=0), offset=offset, rank=numerical_rank(sigma, m), n_samples=m)

    def nu(self, theta: np.ndarray) -> float:
        """``theta^T Sigma theta``; for an h x c matrix, the largest column value."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim == 1:
            theta = theta[:, None]
        if theta.shape[0] != self.sigma.shape[0]:
            raise ShapeError(f"theta has {theta.shape[0]} rows, moment is {self.sigma.shape[0]}-dimensional")
        values = np.einsum("ic,ij,jc->c", theta, self.sigma, theta)
        return float(max(values.max(), 0.0))

    def pinv_sqrt(self) -> np.ndarray:
        """Pseudo-inverse square root; eigenvalues under the rank cutoff are zeroed."""
        w, V = np.linalg.eigh(self.sigma)
        cutoff = max(self.sigma.shape[0], self.n_samples) * max(w.max(), 0.0) * RANK_RTOL
        inv = np.zeros_like(w)
        keep = w > cutoff
        inv[keep] = 1.0 / np.sqrt(w[keep])
        return (V * inv) @ V.T


# --- binary simplified loss ----------------------------------------------------


def _margins(queries: np.ndarray, C1: np.ndarray, C2: np.ndarray, theta: np.ndarray) -> np.ndarray:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    C1, C2, theta = (np.asarray(v, dtype=np.float64).ravel() for v in (C1, C2, theta))
    h = queries.shape[1]
    if not (C1.size == C2.size == theta.size == h):
        raise ShapeError(f"queries have width {h}; prototypes/theta have sizes {C1.size}, {C2.size}, {theta.size}")
    return (queries - 0.5 * (C1 + C2)) @ theta


def binary_loss(queries: np.ndarray, C1: np.ndarray, C2: np.ndarray, theta: np.ndarray) -> float:
    """``sum_q 1 / (1 + exp(<x_q - (C1 + C2)/2, theta>))``."""
    return float(np.sum(expit(-_margins(queries, C1, C2, theta))))


@dataclass(frozen=True)
class BinaryTask:
    queries: np.ndarray
    C1: np.ndarray
    C2: np.ndarray


def regularizer_M(tasks: Sequence[BinaryTask], theta: np.ndarray, moments: EmbeddingMoments) -> float:
    """Average of ``phi(P)(phi(P) - 1/2) / (2(1 + e^P))`` times ``theta^T Sigma theta``
    over every query of every task, with ``P`` the query margin and ``phi`` the
    logistic function."""
    if not tasks:
        raise ContractError("no tasks")
    P = np.concatenate([_margins(t.queries, t.C1, t.C2, theta) for t in tasks])
    phi = expit(P)
    weights = phi * (phi - 0.5) * expit(-P) / 2.0
    return float(weights.mean() * moments.nu(theta))


# --- mixture law of the mixing coefficient -------------------------------------


def _check_shapes(eta: float, gamma: float) -> None:
    if not (eta > 0 and gamma > 0):
        raise ParameterError(f"Beta shapes must be positive, got eta={eta}, gamma={gamma}")


def lambda_bar(eta: float, gamma: float) -> float:
    """Mean of the mixture ``w Beta(eta+1, gamma) + (1-w) Beta(gamma+1, eta)``
    with ``w = eta / (eta + gamma)``."""
    _check_shapes(eta, gamma)
    s = eta + gamma
    return (eta / s) * (eta + 1) / (s + 1) + (gamma / s) * (gamma + 1) / (s + 1)


def sample_lambda_mixture(eta: float, gamma: float, size: int, stream: SeedStream | np.random.Generator) -> np.ndarray:
    _check_shapes(eta, gamma)
    rng = stream.rng() if isinstance(stream, SeedStream) else stream
    pick_first = rng.random(size) < eta / (eta + gamma)
    first = sample_beta(eta + 1, gamma, rng, size=size)
    second = sample_beta(gamma + 1, eta, rng, size=size)
    return np.where(pick_first, first, second)


# --- Taylor remainder ----------------------------------------------------------


@dataclass(frozen=True)
class TaylorResult:
    scales: np.ndarray
    residuals: np.ndarray
    slope: float  # log-log slope of residual against scale; nan if all residuals vanish
    gradient: float  # directional first derivative
    curvature: float  # directional second derivative


def taylor_check(
    loss: Callable[[np.ndarray], float],
    x: np.ndarray,
    direction: np.ndarray,
    scales: Sequence[float] | None = None,
    step: float = 1e-2,
    floor: float = 1e-13,
) -> TaylorResult:
    """Second-order Taylor remainder ``|L(x + s d) - L(x) - s g - s^2 H / 2|``.

    ``g`` and ``H`` are directional derivatives from central differences at
    spacings ``step`` and ``step / 2`` along the unit direction, combined by
    Richardson extrapolation. The slope is fitted over residuals above
    ``floor``; a smooth loss gives a slope near three.
    """
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if d.shape != x.shape:
        raise ShapeError(f"direction shape {d.shape} differs from input shape {x.shape}")
    norm = np.linalg.norm(d)
    if not norm > 0:
        raise ParameterError("direction must be non-zero")
    d = d / norm
    s = np.asarray([0.1 * 2.0**-k for k in range(6)] if scales is None else scales, dtype=np.float64)
    if s.size < 4 or np.any(s <= 0) or np.any(np.diff(s) >= 0):
        raise ParameterError("need at least 4 positive, strictly decreasing scales")
    ratios = s[1:] / s[:-1]
    if not np.allclose(ratios, ratios[0], rtol=1e-9):
        raise ParameterError("scales must decrease geometrically")

    L0 = loss(x)

    def differences(h: float) -> tuple[float, float]:
        Lp, Lm = loss(x + h * d), loss(x - h * d)
        return (Lp - Lm) / (2 * h), (Lp - 2 * L0 + Lm) / h**2

    g1, H1 = differences(step)
    g2, H2 = differences(step / 2)
    g, H = (4 * g2 - g1) / 3, (4 * H2 - H1) / 3
    r = np.array([abs(loss(x + si * d) - L0 - si * g - 0.5 * si * si * H) for si in s])
    usable = r > floor
    if usable.sum() >= 2:
        slope = float(np.polyfit(np.log(s[usable]), np.log(r[usable]), 1)[0])
    else:
        slope = float("nan")
    return TaylorResult(scales=s, residuals=r, slope=slope, gradient=g, curvature=H)


# --- Rademacher complexity -----------------------------------------------------


@dataclass(frozen=True)
class RademacherEstimate:
    estimate: float
    stderr: float
    bound: float  # sqrt(nu * rank / m)
    rank: int
    n_samples: int
    trials: int


def rademacher_bound(nu: float, rank: int, m: int) -> float:
    if nu < 0:
        raise ParameterError(f"nu must be >= 0, got {nu}")
    if m < 1:
        raise ParameterError(f"m must be >= 1, got {m}")
    return math.sqrt(nu * rank / m)


def rademacher_mc(
    X: np.ndarray,
    nu: float,
    trials: int,
    stream: SeedStream | np.random.Generator,
    center: bool = True,
) -> RademacherEstimate:
    """Monte-Carlo empirical Rademacher complexity of the ``nu``-constrained class.

    Per trial the supremum over ``theta^T Sigma theta <= nu`` of
    ``(1/m) sum sigma_i theta^T x_i`` equals
    ``sqrt(nu)/m * |Sigma^{+1/2} sum sigma_i x_i|``.
    """
    if nu < 0:
        raise ParameterError(f"nu must be >= 0, got {nu}")
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    moments = EmbeddingMoments.from_embeddings(X, center=center)
    Xc = np.asarray(X, dtype=np.float64) - moments.offset
    m = Xc.shape[0]
    rng = stream.rng() if isinstance(stream, SeedStream) else stream
    signs = rng.choice(np.array([-1.0, 1.0]), size=(trials, m))
    v = signs @ Xc @ moments.pinv_sqrt()
    values = math.sqrt(nu) / m * np.linalg.norm(v, axis=1)
    stderr = float(values.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return RademacherEstimate(
        estimate=float(values.mean()),
        stderr=stderr,
        bound=rademacher_bound(nu, moments.rank, m),
        rank=moments.rank,
        n_samples=m,
        trials=trials,
    )


# --- closed-form bounds --------------------------------------------------------


def _check_bound_inputs(nu: float, rank: int, counts: dict[str, int]) -> None:
    if nu < 0:
        raise ParameterError(f"nu must be >= 0, got {nu}")
    if rank < 0:
        raise ParameterError(f"rank must be >= 0, got {rank}")
    for name, value in counts.items():
        if value < 1:
            raise ParameterError(f"{name} must be >= 1, got {value}")


def theorem1_bound(nu: float, rank: int, m: int, T: int, epsilon: float) -> float:
    """Task-level generalization gap bound with ``m`` samples per task and ``T`` tasks."""
    _check_bound_inputs(nu, rank, {"m": m, "T": T})
    if not 0 < epsilon < 1:
        raise ParameterError(f"epsilon must lie in (0, 1), got {epsilon}")
    log_term = math.log(2.0 / epsilon)
    complexity = math.sqrt(nu * rank / m) + math.sqrt(nu / T) * rank
    confidence = math.sqrt(log_term / (2 * m)) + math.sqrt(log_term / (2 * T))
    return 2.0 * complexity + 3.0 * confidence


def theorem2_bound(nu: float, rank: int, m: int, n_q: int, epsilon: float) -> float:
    """Bound between the augmented and the query distribution.

    ``epsilon = 1`` is accepted and zeroes the confidence term.
    """
    _check_bound_inputs(nu, rank, {"m": m, "n_q": n_q})
    if not 0 < epsilon <= 1:
        raise ParameterError(f"epsilon must lie in (0, 1], got {epsilon}")
    return (2.0 * math.sqrt(nu * rank) + math.sqrt(math.log(1.0 / epsilon) / 2.0)) * (
        math.sqrt(1.0 / m) + math.sqrt(1.0 / n_q)
    )


# --- empirical gap and report --------------------------------------------------


@dataclass(frozen=True)
class GapPoint:
    epoch: int
    train_acc: float
    test_acc: float

    @property
    def gap(self) -> float:
        return self.train_acc - self.test_acc


def generalization_gap(
    Z: np.ndarray,
    pool: Sequence[Episode],
    test_episodes: Sequence[Episode],
    epoch: int = 0,
) -> GapPoint:
    """Accuracy on the un-augmented training episodes minus accuracy on test episodes."""
    if not pool or not test_episodes:
        raise ContractError("need at least one training and one test episode")
    return GapPoint(epoch, score_episodes(pool, Z).mean_acc, score_episodes(test_episodes, Z).mean_acc)


@dataclass
class BoundReport:
    theorem1_bound: float
    theorem2_bound: float
    nu: float
    nu_trace: float
    rank: int
    m: int
    T: int
    n_q: int
    epsilon: float
    rademacher_mc: float
    rademacher_stderr: float
    rademacher_bound: float
    rademacher_samples: int
    empirical_gap: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ("theorem1_bound", "theorem2_bound", "rademacher_bound"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} is negative")

    def to_json(self) -> dict:
        return asdict(self)
