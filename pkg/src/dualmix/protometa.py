"""Prototype classifier: loss, training loop, prediction and metrics.

The metric projection ``Theta`` (h x h) is applied to every refined embedding
before prototypes are formed, so support and query rows live in the same
projected space. Distances are squared Euclidean and the loss is the mean
negative log-softmax of minus the distance to the true prototype.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dualmix import autodiff as ad
from dualmix.config import RunConfig
from dualmix.encoder import EncoderParams, encode, encode_plain
from dualmix.episodes import (
    STREAM_INIT,
    STREAM_MIXUP,
    STREAM_VALIDATION,
    Episode,
    SeedStream,
    build_task_pool,
    eligible_classes,
)
from dualmix.errors import ContractError, DomainError, FormatError, ShapeError, TrainingError
from dualmix.mixup import TaskRows, dual_mixup, rows_of_episode

log = logging.getLogger(__name__)


# --- parameters ----------------------------------------------------------------


@dataclass
class MetricParams:
    Theta: ad.Tensor

    @classmethod
    def identity(cls, hidden: int) -> "MetricParams":
        return cls(Theta=ad.parameter(np.eye(hidden), name="Theta"))

    def __post_init__(self):
        r, c = self.Theta.shape
        if r != c:
            raise ShapeError(f"Theta must be square, got {self.Theta.shape}")


@dataclass
class ModelParams:
    """Encoder and metric parameters.

    ``scale`` is a fixed multiplier on the degree-refined embeddings. The
    node softmax makes the weights average ``1/n``, which leaves every
    distance near zero and the loss flat at ``ln N``; scaling by ``n``
    restores unit-mean weights. It is not trained and does not affect which
    prototype is nearest.
    """

    encoder: EncoderParams
    metric: MetricParams
    use_degree: bool = True
    scale: float = 1.0

    @classmethod
    def initialize(
        cls,
        n_features: int,
        hidden: int = 16,
        rng: np.random.Generator | None = None,
        use_degree: bool = True,
        scale: float = 1.0,
    ) -> "ModelParams":
        return cls(EncoderParams.initialize(n_features, hidden, rng), MetricParams.identity(hidden), use_degree, scale)

    @property
    def hidden(self) -> int:
        return self.encoder.hidden

    def tensors(self) -> list[ad.Tensor]:
        if self.use_degree:
            return [self.encoder.W_star, self.encoder.W_deg, self.metric.Theta]
        return [self.encoder.W_star, self.metric.Theta]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "W_star": self.encoder.W_star.value.copy(),
            "W_deg": self.encoder.W_deg.value.copy(),
            "Theta": self.metric.Theta.value.copy(),
            "use_degree": np.array(self.use_degree),
            "scale": np.array(self.scale),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        try:
            W_star, W_deg, Theta = arrays["W_star"], arrays["W_deg"], arrays["Theta"]
        except KeyError as exc:
            raise FormatError(f"parameter file lacks {exc.args[0]}") from None
        if W_deg.shape != (W_star.shape[0], 1) or Theta.shape != (W_star.shape[1], W_star.shape[1]):
            raise ShapeError("inconsistent parameter shapes")
        return cls(
            EncoderParams(ad.parameter(W_star, name="W_star"), ad.parameter(W_deg, name="W_deg")),
            MetricParams(ad.parameter(Theta, name="Theta")),
            bool(arrays.get("use_degree", True)),
            float(arrays.get("scale", 1.0)),
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.arrays())

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **self.arrays())

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        try:
            with np.load(path) as data:
                return cls.from_arrays({k: data[k] for k in data.files})
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot read parameters from {path}: {exc}") from None


def embed_tensor(P, degrees: np.ndarray, params: ModelParams) -> ad.Tensor:
    """Projected embeddings ``X @ Theta`` as a differentiable tensor."""
    if params.use_degree:
        X = encode(P, degrees, params.encoder).X
        if params.scale != 1.0:
            X = ad.scale(X, params.scale)
    else:
        X = encode_plain(P, params.encoder)
    return ad.matmul(X, params.metric.Theta)


def embed(P, degrees: np.ndarray, params: ModelParams) -> np.ndarray:
    return embed_tensor(P, degrees, params).value


# --- prototypes and loss -------------------------------------------------------


@dataclass(frozen=True)
class PrototypeSet:
    values: np.ndarray  # N x h, row k is class k

    @property
    def n_way(self) -> int:
        return self.values.shape[0]


def _averaging_matrix(labels: np.ndarray, n_way: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    A = np.zeros((n_way, labels.size))
    A[labels, np.arange(labels.size)] = 1.0
    counts = A.sum(axis=1)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ContractError(f"classes {empty.tolist()} have no support rows")
    return A / counts[:, None]


def compute_prototypes(support: np.ndarray, labels: np.ndarray, n_way: int | None = None) -> PrototypeSet:
    support = np.asarray(support, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if support.shape[0] != labels.size:
        raise ShapeError(f"{support.shape[0]} support rows but {labels.size} labels")
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    return PrototypeSet(_averaging_matrix(labels, n_way) @ support)


def prototype_loss(
    support: ad.Tensor,
    support_labels: np.ndarray,
    query: ad.Tensor,
    query_labels: np.ndarray,
    n_way: int,
) -> ad.Tensor:
    """Mean cross-entropy of the distance softmax over already projected rows."""
    query_labels = np.asarray(query_labels, dtype=np.int64)
    if query.shape[0] == 0:
        raise ContractError("episode has no query rows")
    if query.shape[0] != query_labels.size:
        raise ShapeError(f"{query.shape[0]} query rows but {query_labels.size} labels")
    protos = ad.matmul(ad.constant(_averaging_matrix(support_labels, n_way)), support)
    logp = ad.log_softmax(ad.scale(ad.sq_dist(query, protos), -1.0))
    onehot = np.zeros((query_labels.size, n_way))
    onehot[np.arange(query_labels.size), query_labels] = 1.0
    return ad.scale(ad.total(ad.multiply(logp, ad.constant(onehot))), -1.0 / query_labels.size)


def episode_loss(task: TaskRows, Z: ad.Tensor) -> ad.Tensor:
    """Loss of one task in coefficient form against projected embeddings ``Z``."""
    local = ad.row_select(Z, task.nodes)
    return prototype_loss(
        ad.matmul(ad.constant(task.support), local),
        task.support_labels,
        ad.matmul(ad.constant(task.query), local),
        task.query_labels,
        task.n_way,
    )


def tasks_loss(tasks: Sequence[TaskRows], Z: ad.Tensor) -> ad.Tensor:
    """Average of per-task losses."""
    if not tasks:
        raise ContractError("no tasks to train on")
    losses = [episode_loss(t, Z) for t in tasks]
    return ad.scale(ad.total(ad.vstack(losses)), 1.0 / len(losses))


# --- prediction and metrics ----------------------------------------------------


def nearest_prototype(queries: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Index of the nearest prototype per row; ties go to the lowest index."""
    diff = queries[:, None, :] - prototypes[None, :, :]
    return np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)


def predict(episode: Episode, Z: np.ndarray) -> np.ndarray:
    """Predicted local class per query node, with ``Z`` the projected embeddings."""
    protos = compute_prototypes(Z[episode.support_nodes()], episode.support_labels(), episode.n_way)
    return nearest_prototype(Z[episode.query_nodes()], protos.values)


def macro_f1(truth: np.ndarray, pred: np.ndarray, n_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1 over classes present in truth or predictions.

    A class with no true positives gets F1 = 0.
    """
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    classes = np.arange(n_classes) if n_classes is not None else np.union1d(truth, pred)
    scores = []
    for c in classes:
        tp = np.sum((pred == c) & (truth == c))
        denom = np.sum(pred == c) + np.sum(truth == c)
        scores.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return float(np.mean(scores)) if scores else 0.0


@dataclass
class Metrics:
    accuracies: list[float]
    f1_scores: list[float]

    def __post_init__(self):
        if len(self.accuracies) != len(self.f1_scores):
            raise ShapeError("one F1 score per accuracy expected")

    @property
    def n_tasks(self) -> int:
        return len(self.accuracies)

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else 0.0

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1_scores)) if self.f1_scores else 0.0

    @property
    def ci95(self) -> float:
        """Half-width of a normal 95% interval on the mean accuracy."""
        if len(self.accuracies) < 2:
            return 0.0
        return float(1.96 * np.std(self.accuracies) / np.sqrt(len(self.accuracies)))

    def to_json(self) -> dict:
        return {
            "accuracies": list(self.accuracies),
            "f1_scores": list(self.f1_scores),
            "mean_acc": self.mean_acc,
            "macro_f1": self.macro_f1,
            "ci95": self.ci95,
        }


def score_episodes(episodes: Sequence[Episode], Z: np.ndarray) -> Metrics:
    accs, f1s = [], []
    for ep in episodes:
        pred = predict(ep, Z)
        truth = ep.query_labels()
        accs.append(float(np.mean(pred == truth)))
        f1s.append(macro_f1(truth, pred, ep.n_way))
    return Metrics(accs, f1s)


def evaluate(
    labels: np.ndarray,
    classes: Sequence[int],
    Z: np.ndarray,
    stream: SeedStream,
    n_tasks: int = 50,
    n_way: int = 5,
    k_shot: int = 5,
    m_query: int = 10,
) -> Metrics:
    """Accuracy and macro-F1 over ``n_tasks`` fresh episodes from ``classes``."""
    episodes = build_task_pool(labels, classes, n_tasks, n_way, k_shot, m_query, stream)
    return score_episodes(episodes, Z)


# --- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    best_val_acc: float | None = None


def _step_loss(tasks: Sequence[TaskRows], P, degrees, params: ModelParams, epoch: int) -> ad.Tensor:
    try:
        loss = tasks_loss(tasks, embed_tensor(P, degrees, params))
    except DomainError as exc:
        raise TrainingError(f"non-finite value at epoch {epoch}: {exc}", epoch=epoch) from None
    if not np.isfinite(loss.value[0, 0]):
        raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
    return loss


def train(
    pool: Sequence[Episode],
    P,
    degrees: np.ndarray,
    config: RunConfig,
    labels: np.ndarray | None = None,
    val_classes: Sequence[int] = (),
    params: ModelParams | None = None,
    on_check: Callable[[int, ModelParams], dict] | None = None,
) -> TrainResult:
    """Meta-train on an episode pool.

    Every epoch rebuilds the mixup recipes (unless ``regenerate_mixup`` is
    off), evaluates the averaged loss over all tasks and takes one Adam step.
    Every ``eval_every`` epochs the model is scored on fixed validation
    episodes; the best-scoring parameters are returned and training stops
    after ``patience`` checks without improvement. Without enough validation
    classes training runs for ``max_epochs`` and returns the final state.

    ``on_check`` is called at each check with ``(epoch, params)``; whatever it
    returns is merged into that epoch's history entry.
    """
    stream = SeedStream(config.seed)
    feats = P.values if hasattr(P, "values") else np.asarray(P)
    if params is None:
        params = ModelParams.initialize(
            feats.shape[1],
            config.hidden_dim,
            stream.child(STREAM_INIT).rng(),
            use_degree=not config.no_degree,
            scale=config.resolved_embedding_scale(feats.shape[0]),
        )
    if not pool:
        raise ContractError("empty training pool")
    mix_cfg = config.mixup()
    base_rows = [rows_of_episode(ep) for ep in pool]

    val_episodes: list[Episode] = []
    if labels is not None and val_classes:
        usable = eligible_classes(np.asarray(labels), val_classes, config.k_shot + config.m_query)
        if len(usable) >= config.n_way:
            val_episodes = build_task_pool(
                labels, usable, config.val_tasks, config.n_way, config.k_shot, config.m_query,
                stream.child(STREAM_VALIDATION),
            )
    if not val_episodes:
        log.info("no usable validation classes; training for a fixed %d epochs", config.max_epochs)

    opt = ad.Adam(params.tensors(), lr=config.lr, weight_decay=config.weight_decay)
    result = TrainResult(params=params.copy())
    best_acc = -np.inf
    stale = 0
    fixed_tasks = None
    for epoch in range(1, config.max_epochs + 1):
        if not config.uses_mixup:
            tasks = base_rows
        elif config.regenerate_mixup or fixed_tasks is None:
            tasks = dual_mixup(pool, mix_cfg, stream.child(STREAM_MIXUP).child(epoch)).tasks
            fixed_tasks = tasks
        else:
            tasks = fixed_tasks
        loss = _step_loss(tasks, P, degrees, params, epoch)
        opt.step(ad.gradients(loss, params.tensors()))
        entry = {"epoch": epoch, "loss": float(loss.value[0, 0])}
        result.history.append(entry)
        result.epochs_run = epoch

        if epoch % config.eval_every != 0:
            continue
        if on_check is not None:
            entry.update(on_check(epoch, params))
        if not val_episodes:
            continue
        val_acc = score_episodes(val_episodes, embed(P, degrees, params)).mean_acc
        entry["val_acc"] = val_acc
        if val_acc > best_acc:
            best_acc, stale = val_acc, 0
            result.params, result.best_epoch, result.best_val_acc = params.copy(), epoch, val_acc
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                break

    if result.best_val_acc is None:
        result.params, result.best_epoch = params.copy(), result.epochs_run
    return result
