"""End-to-end runs: load a dataset directory, train, evaluate, check bounds.

Every random choice in a run derives from ``config.seed`` through fixed
stream indices, so repeated commands with the same inputs write identical
files.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dualmix import protometa as pm
from dualmix.config import RunConfig
from dualmix.encoder import encode, encode_plain
from dualmix.episodes import (
    STREAM_POOL,
    STREAM_TEST,
    STREAM_THEORY,
    ClassSplit,
    Episode,
    SeedStream,
    build_task_pool,
    load_split,
)
from dualmix.errors import SplitError, StorageError
from dualmix.graph import (
    NormalizedAdjacency,
    PropagatedFeatures,
    SparseGraph,
    cached_propagation,
    normalize,
    read_dataset,
)
from dualmix.synth import SPLITS_FILE
from dualmix import theory

log = logging.getLogger(__name__)

PARAMS_FILE = "params.npz"
CONFIG_FILE = "config.json"
RESULTS_JSON = "results.json"
RESULTS_CSV = "results.csv"
GAP_TRACE_CSV = "gap_trace.csv"
BOUND_REPORT = "bound_report.json"
EMBEDDINGS_CSV = "embeddings.csv"


@dataclass
class Dataset:
    graph: SparseGraph
    split: ClassSplit
    adj: NormalizedAdjacency
    P: PropagatedFeatures

    @property
    def labels(self) -> np.ndarray:
        return self.graph.labels

    @property
    def degrees(self) -> np.ndarray:
        return self.adj.degrees


def load_dataset(data_dir: str | Path, hops: int, cache_dir: str | Path | None = None) -> Dataset:
    data_dir = Path(data_dir)
    graph = read_dataset(data_dir)
    split_path = data_dir / SPLITS_FILE
    if not split_path.is_file():
        raise SplitError(f"missing {SPLITS_FILE} in {data_dir}")
    split = load_split(split_path, graph.classes())
    adj = normalize(graph)
    P = cached_propagation(graph, hops, cache_dir=cache_dir, adj=adj)
    return Dataset(graph=graph, split=split, adj=adj, P=P)


def training_pool(ds: Dataset, config: RunConfig) -> list[Episode]:
    return build_task_pool(
        ds.labels, ds.split.train, config.t_org, config.n_way, config.k_shot, config.m_query,
        SeedStream(config.seed).child(STREAM_POOL),
    )


def test_episodes(ds: Dataset, config: RunConfig) -> list[Episode]:
    return build_task_pool(
        ds.labels, ds.split.test, config.eval_tasks, config.n_way, config.k_shot, config.m_query,
        SeedStream(config.seed).child(STREAM_TEST),
    )


def refined_embeddings(ds: Dataset, params: pm.ModelParams, scaled: bool = True) -> np.ndarray:
    """Encoder output before the metric projection."""
    if not params.use_degree:
        return encode_plain(ds.P, params.encoder).value
    X = encode(ds.P, ds.degrees, params.encoder).X.value
    return X * params.scale if scaled else X


# --- output helpers ------------------------------------------------------------


def _out_dir(path: str | Path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {out}: {exc}") from None
    return out


def _write_json(path: Path, payload: dict) -> None:
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from None


def _write_csv(path: Path, header: list[str], rows) -> None:
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from None


def write_metrics(out: Path, config: RunConfig, metrics: pm.Metrics, history: list[dict]) -> None:
    payload = {"config": config.to_json(), **metrics.to_json(), "history": history}
    _write_json(out / RESULTS_JSON, payload)
    _write_csv(
        out / RESULTS_CSV,
        ["task", "accuracy", "macro_f1"],
        ([t, repr(a), repr(f)] for t, (a, f) in enumerate(zip(metrics.accuracies, metrics.f1_scores))),
    )


def write_gap_trace(out: Path, trace: list[theory.GapPoint]) -> None:
    _write_csv(
        out / GAP_TRACE_CSV,
        ["epoch", "train_acc", "test_acc", "gap"],
        ([p.epoch, repr(p.train_acc), repr(p.test_acc), repr(p.gap)] for p in trace),
    )


# --- commands ------------------------------------------------------------------


@dataclass
class TrainOutcome:
    result: pm.TrainResult
    metrics: pm.Metrics
    gap_trace: list[theory.GapPoint]
    dataset: Dataset
    pool: list[Episode]


def run_train(config: RunConfig, data_dir: str | Path, out_dir: str | Path) -> TrainOutcome:
    out = _out_dir(out_dir)
    ds = load_dataset(data_dir, config.l_hops, cache_dir=out)
    pool = training_pool(ds, config)
    test_eps = test_episodes(ds, config)
    trace: list[theory.GapPoint] = []

    def on_check(epoch: int, params: pm.ModelParams) -> dict:
        point = theory.generalization_gap(pm.embed(ds.P, ds.degrees, params), pool, test_eps, epoch)
        trace.append(point)
        return {"train_acc": point.train_acc, "test_acc": point.test_acc, "gap": point.gap}

    result = pm.train(pool, ds.P, ds.degrees, config, ds.labels, ds.split.val, on_check=on_check)
    metrics = pm.score_episodes(test_eps, pm.embed(ds.P, ds.degrees, result.params))
    try:
        result.params.save(out / PARAMS_FILE)
    except OSError as exc:
        raise StorageError(f"cannot write parameters: {exc}") from None
    _write_json(out / CONFIG_FILE, config.to_json())
    write_metrics(out, config, metrics, result.history)
    write_gap_trace(out, trace)
    return TrainOutcome(result=result, metrics=metrics, gap_trace=trace, dataset=ds, pool=pool)


def run_eval(config: RunConfig, params_path: str | Path, data_dir: str | Path, out_dir: str | Path) -> pm.Metrics:
    out = _out_dir(out_dir)
    params = pm.ModelParams.load(params_path)
    ds = load_dataset(data_dir, config.l_hops, cache_dir=out)
    metrics = pm.score_episodes(test_episodes(ds, config), pm.embed(ds.P, ds.degrees, params))
    write_metrics(out, config, metrics, [])
    return metrics


def bound_report(
    config: RunConfig,
    ds: Dataset,
    params: pm.ModelParams,
    pool: list[Episode],
    gap_trace: list[theory.GapPoint],
) -> theory.BoundReport:
    """Bound inputs estimated from the query embeddings of the training pool."""
    nodes = np.unique(np.concatenate([ep.query_nodes() for ep in pool]))
    X = refined_embeddings(ds, params)[nodes]
    moments = theory.EmbeddingMoments.from_embeddings(X, center=True)
    Theta = params.metric.Theta.value
    nu = moments.nu(Theta)
    nu_trace = float(np.trace(Theta.T @ moments.sigma @ Theta))
    mix = config.mixup()
    per_class_extra = int(np.floor(mix.within_ratio * config.m_query))
    m = config.n_way * (config.m_query + per_class_extra)
    T = (config.t_org if config.include_original else 0) + mix.resolved_t_aug(config.t_org)
    n_q = config.n_way * config.m_query
    rad = theory.rademacher_mc(X, nu, config.rademacher_trials, SeedStream(config.seed).child(STREAM_THEORY))
    return theory.BoundReport(
        theorem1_bound=theory.theorem1_bound(nu, moments.rank, m, T, config.epsilon),
        theorem2_bound=theory.theorem2_bound(nu, moments.rank, m, n_q, config.epsilon),
        nu=nu,
        nu_trace=nu_trace,
        rank=moments.rank,
        m=m,
        T=T,
        n_q=n_q,
        epsilon=config.epsilon,
        rademacher_mc=rad.estimate,
        rademacher_stderr=rad.stderr,
        rademacher_bound=rad.bound,
        rademacher_samples=rad.n_samples,
        empirical_gap=[{"epoch": p.epoch, "train_acc": p.train_acc, "test_acc": p.test_acc, "gap": p.gap} for p in gap_trace],
    )


def run_verify(
    config: RunConfig,
    data_dir: str | Path,
    out_dir: str | Path,
    params_path: str | Path | None = None,
) -> theory.BoundReport:
    """Bound report for given parameters, or for a fresh training run when none are given."""
    out = _out_dir(out_dir)
    if params_path is None:
        outcome = run_train(config, data_dir, out)
        ds, pool, params, trace = outcome.dataset, outcome.pool, outcome.result.params, outcome.gap_trace
    else:
        params = pm.ModelParams.load(params_path)
        ds = load_dataset(data_dir, config.l_hops, cache_dir=out)
        pool = training_pool(ds, config)
        Z = pm.embed(ds.P, ds.degrees, params)
        trace = [theory.generalization_gap(Z, pool, test_episodes(ds, config))]
        write_gap_trace(out, trace)
    report = bound_report(config, ds, params, pool, trace)
    _write_json(out / BOUND_REPORT, report.to_json())
    return report


def run_dump_embeddings(params_path: str | Path, data_dir: str | Path, out_dir: str | Path, hops: int = 2) -> Path:
    """Write the refined embeddings ``X`` (unscaled, before the metric), one row per node."""
    out = _out_dir(out_dir)
    params = pm.ModelParams.load(params_path)
    ds = load_dataset(data_dir, hops, cache_dir=out)
    X = refined_embeddings(ds, params, scaled=False)
    path = out / EMBEDDINGS_CSV
    _write_csv(path, [f"x{j}" for j in range(X.shape[1])], ([repr(float(v)) for v in row] for row in X))
    return path
