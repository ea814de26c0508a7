"""Dual-level mixup: within-task node interpolation and across-task prototype
interpolation.

Mixup is expressed as *recipes* (which sources, which coefficient) rather
than as mixed vectors, because the embeddings change on every optimizer step.
A recipe is turned into a vector either one at a time with :func:`materialize`
or, for training, in bulk: every mixed row is a fixed linear combination of
node embeddings, so each task becomes a pair of coefficient matrices
(:class:`TaskRows`) applied to the current embeddings.

Mixing coefficients are Beta(eta, gamma) draws computed as ``x / (x + y)``
with ``x ~ Gamma(eta)`` and ``y ~ Gamma(gamma)``. This ratio construction is
valid for shapes below one, including the default 0.5.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dualmix import autodiff as ad
from dualmix.episodes import Episode, SeedStream
from dualmix.errors import CapacityError, ContractError, ParameterError

log = logging.getLogger(__name__)

WITHIN_SUPPORT = "within-support"
WITHIN_QUERY = "within-query"
ACROSS_SUPPORT = "across-support"
ACROSS_QUERY = "across-query"

PROTOTYPE = "prototype"
INSTANCE = "instance"

MAX_PAIR_ATTEMPTS = 100


@dataclass(frozen=True)
class MixupConfig:
    eta: float = 0.5
    gamma: float = 0.5
    within_ratio: float = 1.0
    t_aug: int | None = None  # None: as many interpolated tasks as original ones
    include_original: bool = True
    across_mode: str = PROTOTYPE

    def __post_init__(self):
        if not (self.eta > 0 and self.gamma > 0):
            raise ParameterError(f"Beta shapes must be positive, got eta={self.eta}, gamma={self.gamma}")
        if self.within_ratio < 0:
            raise ParameterError(f"within_ratio must be >= 0, got {self.within_ratio}")
        if self.t_aug is not None and self.t_aug < 0:
            raise ParameterError(f"t_aug must be >= 0, got {self.t_aug}")
        if self.across_mode not in (PROTOTYPE, INSTANCE):
            raise ParameterError(f"across_mode must be '{PROTOTYPE}' or '{INSTANCE}', got {self.across_mode!r}")

    def resolved_t_aug(self, t_org: int) -> int:
        return t_org if self.t_aug is None else self.t_aug


def _rng(source: np.random.Generator | SeedStream) -> np.random.Generator:
    return source.rng() if isinstance(source, SeedStream) else source


def sample_beta(
    eta: float,
    gamma: float,
    stream: np.random.Generator | SeedStream,
    size: int | None = None,
) -> float | np.ndarray:
    """Draw from Beta(eta, gamma) through the two-gamma ratio."""
    if not (eta > 0 and gamma > 0):
        raise ParameterError(f"Beta shapes must be positive, got eta={eta}, gamma={gamma}")
    rng = _rng(stream)
    n = 1 if size is None else size
    x = rng.standard_gamma(eta, size=n)
    y = rng.standard_gamma(gamma, size=n)
    s = x + y
    # both gammas can underflow to 0 for tiny shapes; redraw those
    while np.any(s == 0):
        bad = s == 0
        x[bad] = rng.standard_gamma(eta, size=bad.sum())
        y[bad] = rng.standard_gamma(gamma, size=bad.sum())
        s = x + y
    lam = x / s
    return float(lam[0]) if size is None else lam


@dataclass(frozen=True)
class MixRecipe:
    """One synthetic row.

    ``sources`` are two node ids for within-task recipes, ``(task, class)``
    pairs for prototype-mode across-task recipes and ``(task, class, position)``
    triples for instance-mode ones. The result is ``lam * first + (1 - lam) * second``.
    """

    kind: str
    sources: tuple
    lam: float
    label: int

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"mixing coefficient {self.lam} outside [0, 1]")


@dataclass(frozen=True)
class RecipeBlock:
    """Recipes of one kind stored column-wise; iterating yields :class:`MixRecipe`."""

    kind: str
    first: tuple
    second: tuple
    lams: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.first)
        if not (len(self.second) == n == self.lams.size == self.labels.size):
            raise ContractError("recipe block columns differ in length")
        if n and (self.lams.min() < 0.0 or self.lams.max() > 1.0):
            raise ParameterError("mixing coefficient outside [0, 1]")

    def __len__(self) -> int:
        return len(self.first)

    def __getitem__(self, i: int) -> MixRecipe:
        return MixRecipe(self.kind, (self.first[i], self.second[i]), float(self.lams[i]), int(self.labels[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


@dataclass(frozen=True)
class AugmentedEpisode:
    base: Episode
    extra_support: tuple[MixRecipe, ...] = ()
    extra_query: tuple[MixRecipe, ...] = ()

    @property
    def n_way(self) -> int:
        return self.base.n_way

    @property
    def m_support(self) -> int:
        """Support size after within-task mixup."""
        return len(self.base.support) + len(self.extra_support)

    @property
    def m_query(self) -> int:
        return len(self.base.query) + len(self.extra_query)

    def support_entries(self) -> list[int | MixRecipe]:
        """Support rows in canonical order: original nodes, then recipes."""
        return [n for n, _ in self.base.support] + list(self.extra_support)

    def query_entries(self) -> list[int | MixRecipe]:
        return [n for n, _ in self.base.query] + list(self.extra_query)

    def support_labels(self) -> np.ndarray:
        return np.array([c for _, c in self.base.support] + [r.label for r in self.extra_support], dtype=np.int64)

    def query_labels(self) -> np.ndarray:
        return np.array([c for _, c in self.base.query] + [r.label for r in self.extra_query], dtype=np.int64)


@dataclass(frozen=True)
class InterpolatedTask:
    """A synthetic N-way task built from two pool tasks.

    ``identities[c] = (i, k, j, k2)`` names the class pair that synthetic class
    ``c`` was mixed from.
    """

    tasks: tuple[int, int]
    identities: tuple[tuple[int, int, int, int], ...]
    support: RecipeBlock
    query: RecipeBlock
    mode: str = PROTOTYPE

    @property
    def n_way(self) -> int:
        return len(self.identities)

    def support_labels(self) -> np.ndarray:
        return self.support.labels

    def query_labels(self) -> np.ndarray:
        return self.query.labels


# --- within-task ---------------------------------------------------------------


def _within_recipes(
    pairs: Sequence[tuple[int, int]],
    per_class: int,
    kind: str,
    eta: float,
    gamma: float,
    rng: np.random.Generator,
) -> list[MixRecipe]:
    by_class: dict[int, list[int]] = {}
    for node, cls in pairs:
        by_class.setdefault(cls, []).append(node)
    recipes = []
    for cls in sorted(by_class):
        members = by_class[cls]
        if per_class == 0:
            continue
        if len(members) < 2:
            log.warning("class %d has a single %s sample; duplicating it", cls, kind.split("-")[1])
        lams = sample_beta(eta, gamma, rng, size=per_class)
        if len(members) >= 2:
            # distinct endpoints: shift the second draw past the first
            first = rng.integers(len(members), size=per_class)
            second = rng.integers(len(members) - 1, size=per_class)
            second += second >= first
        else:
            first = second = np.zeros(per_class, dtype=np.int64)
        for lam, a, b in zip(lams, first, second):
            recipes.append(MixRecipe(kind, (members[a], members[b]), float(lam), cls))
    return recipes


def within_task_mixup(
    episode: Episode, config: MixupConfig, stream: np.random.Generator | SeedStream
) -> AugmentedEpisode:
    """Add ``floor(within_ratio * K)`` support and ``floor(within_ratio * M)``
    query recipes per class, each mixing two distinct same-class nodes.

    Labels are copied from the sources, never interpolated.
    """
    rng = _rng(stream)
    n_support = math.floor(config.within_ratio * episode.k_shot)
    n_query = math.floor(config.within_ratio * episode.m_query)
    support = _within_recipes(episode.support, n_support, WITHIN_SUPPORT, config.eta, config.gamma, rng)
    query = _within_recipes(episode.query, n_query, WITHIN_QUERY, config.eta, config.gamma, rng)
    return AugmentedEpisode(base=episode, extra_support=tuple(support), extra_query=tuple(query))


# --- across-task ---------------------------------------------------------------


def _draw_identities(pool, i: int, j: int, n_way: int, rng) -> list[tuple[int, int, int, int]]:
    used: list[tuple[int, int, int, int]] = []
    attempts = 0
    while len(used) < n_way:
        ident = (i, int(rng.integers(pool[i].n_way)), j, int(rng.integers(pool[j].n_way)))
        if ident not in used:
            used.append(ident)
            continue
        attempts += 1
        if attempts >= MAX_PAIR_ATTEMPTS:
            raise CapacityError(
                f"could not draw {n_way} distinct class pairs from tasks {i} and {j} in {MAX_PAIR_ATTEMPTS} attempts"
            )
    return used


def _class_positions(labels: np.ndarray, cls: int) -> int:
    return int(np.sum(labels == cls))


def _across(
    pool: Sequence[AugmentedEpisode],
    config: MixupConfig,
    stream,
    mode: str,
    fixed_lambda: float | None,
) -> list[InterpolatedTask]:
    if len(pool) < 2:
        raise CapacityError(f"across-task mixup needs at least 2 tasks, pool has {len(pool)}")
    rng = _rng(stream)
    t_aug = config.resolved_t_aug(len(pool))
    n_way = pool[0].n_way
    out = []
    for _ in range(t_aug):
        i, j = (int(v) for v in rng.choice(len(pool), size=2, replace=False))
        identities = _draw_identities(pool, i, j, n_way, rng)
        blocks = {}
        for kind, which in ((ACROSS_SUPPORT, "support"), (ACROSS_QUERY, "query")):
            labels_i = pool[i].support_labels() if which == "support" else pool[i].query_labels()
            labels_j = pool[j].support_labels() if which == "support" else pool[j].query_labels()
            first, second, labels = [], [], []
            for c, (_, k, _, k2) in enumerate(identities):
                if mode == PROTOTYPE:
                    # m' (or m) recipes per synthetic class
                    n_rows = pool[i].m_support if which == "support" else pool[i].m_query
                    first.extend([(i, k)] * n_rows)
                    second.extend([(j, k2)] * n_rows)
                else:
                    n_rows = min(_class_positions(labels_i, k), _class_positions(labels_j, k2))
                    first.extend((i, k, p) for p in range(n_rows))
                    second.extend((j, k2, p) for p in range(n_rows))
                labels.extend([c] * n_rows)
            if fixed_lambda is None:
                lams = sample_beta(config.eta, config.gamma, rng, size=len(labels))
            else:
                lams = np.full(len(labels), float(fixed_lambda))
            blocks[which] = RecipeBlock(kind, tuple(first), tuple(second), lams, np.array(labels, dtype=np.int64))
        out.append(
            InterpolatedTask(
                tasks=(i, j),
                identities=tuple(identities),
                support=blocks["support"],
                query=blocks["query"],
                mode=mode,
            )
        )
    return out


def across_task_mixup(
    pool: Sequence[AugmentedEpisode],
    config: MixupConfig,
    stream: np.random.Generator | SeedStream,
    fixed_lambda: float | None = None,
) -> list[InterpolatedTask]:
    """Interpolated tasks mixing class prototypes of two distinct pool tasks.

    ``fixed_lambda`` replaces every Beta draw with a constant; it exists for
    analysis and testing, training never sets it.
    """
    return _across(pool, config, stream, PROTOTYPE, fixed_lambda)


def across_task_mixup_instance(
    pool: Sequence[AugmentedEpisode],
    config: MixupConfig,
    stream: np.random.Generator | SeedStream,
    fixed_lambda: float | None = None,
) -> list[InterpolatedTask]:
    """Instance-level variant: position ``p`` of class ``k`` in task ``i`` is
    mixed with position ``p`` of class ``k2`` in task ``j``."""
    return _across(pool, config, stream, INSTANCE, fixed_lambda)


# --- materialization -----------------------------------------------------------


@dataclass
class SourceCache:
    """Per-task rows and class prototypes of a pool, evaluated on one forward pass.

    Keys: ``(set, task, class)`` for prototypes and ``(set, task, class,
    position)`` for rows, with ``set`` one of ``"support"``/``"query"``.
    """

    prototypes: dict[tuple, ad.Tensor] = field(default_factory=dict)
    rows: dict[tuple, ad.Tensor] = field(default_factory=dict)


def build_source_cache(pool: Sequence[AugmentedEpisode], X: ad.Tensor) -> SourceCache:
    cache = SourceCache()
    for t, aug in enumerate(pool):
        for name, entries, labels in (
            ("support", aug.support_entries(), aug.support_labels()),
            ("query", aug.query_entries(), aug.query_labels()),
        ):
            per_class: dict[int, list[ad.Tensor]] = {}
            for entry, cls in zip(entries, labels):
                row = materialize(entry, X) if isinstance(entry, MixRecipe) else _node_row(X, entry)
                per_class.setdefault(int(cls), []).append(row)
            for cls, rows in per_class.items():
                for p, row in enumerate(rows):
                    cache.rows[(name, t, cls, p)] = row
                cache.prototypes[(name, t, cls)] = ad.row_mean(ad.vstack(rows))
    return cache


def _node_row(X: ad.Tensor, node: int) -> ad.Tensor:
    if not 0 <= int(node) < X.shape[0]:
        raise ContractError(f"node {node} is not a row of the current embeddings ({X.shape[0]} rows)")
    return ad.row_select(X, [int(node)])


def materialize(recipe: MixRecipe, X: ad.Tensor, cache: SourceCache | None = None) -> ad.Tensor:
    """Evaluate one recipe against embeddings ``X`` as a 1 x h tensor."""
    first, second = recipe.sources
    if recipe.kind in (WITHIN_SUPPORT, WITHIN_QUERY):
        return ad.convex_combine(_node_row(X, first), _node_row(X, second), recipe.lam)
    if recipe.kind not in (ACROSS_SUPPORT, ACROSS_QUERY):
        raise ContractError(f"unknown recipe kind {recipe.kind!r}")
    if cache is None:
        raise ContractError("across-task recipes need a source cache")
    name = "support" if recipe.kind == ACROSS_SUPPORT else "query"
    table = cache.prototypes if len(first) == 2 else cache.rows
    try:
        a, b = table[(name, *first)], table[(name, *second)]
    except KeyError as exc:
        raise ContractError(f"stale source {exc.args[0]} in recipe") from None
    return ad.convex_combine(a, b, recipe.lam)


# --- bulk coefficient form -----------------------------------------------------


@dataclass(frozen=True)
class TaskRows:
    """A task as coefficient matrices over a local node set.

    Support rows are ``support @ X[nodes]`` and query rows ``query @ X[nodes]``.
    """

    nodes: np.ndarray
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    n_way: int

    def embed(self, nodes: np.ndarray) -> "TaskRows":
        """Re-express over a superset of ``self.nodes``."""
        pos = np.searchsorted(nodes, self.nodes)
        s = np.zeros((self.support.shape[0], nodes.size))
        q = np.zeros((self.query.shape[0], nodes.size))
        s[:, pos] = self.support
        q[:, pos] = self.query
        return TaskRows(nodes, s, self.support_labels, q, self.query_labels, self.n_way)

    def class_rows(self, which: str, cls: int) -> np.ndarray:
        coef = self.support if which == "support" else self.query
        labels = self.support_labels if which == "support" else self.query_labels
        return coef[labels == cls]

    def prototype_coefficients(self, which: str, cls: int) -> np.ndarray:
        return self.class_rows(which, cls).mean(axis=0)


def _coefficients(entries, nodes: np.ndarray) -> np.ndarray:
    rows, cols, vals = [], [], []
    for r, entry in enumerate(entries):
        if isinstance(entry, MixRecipe):
            a, b = entry.sources
            rows += [r, r]
            cols += [a, b]
            vals += [entry.lam, 1.0 - entry.lam]
        else:
            rows.append(r)
            cols.append(entry)
            vals.append(1.0)
    coef = np.zeros((len(entries), nodes.size))
    np.add.at(coef, (np.array(rows, dtype=np.int64), np.searchsorted(nodes, cols)), vals)
    return coef


def rows_of_episode(aug: AugmentedEpisode | Episode) -> TaskRows:
    if isinstance(aug, Episode):
        aug = AugmentedEpisode(base=aug)
    s_entries, q_entries = aug.support_entries(), aug.query_entries()
    # recipe sources are normally episode nodes, but nothing requires it
    sources = [n for r in aug.extra_support + aug.extra_query for n in r.sources]
    nodes = np.unique(np.array([n for n, _ in aug.base.support + aug.base.query] + sources, dtype=np.int64))
    return TaskRows(
        nodes=nodes,
        support=_coefficients(s_entries, nodes),
        support_labels=aug.support_labels(),
        query=_coefficients(q_entries, nodes),
        query_labels=aug.query_labels(),
        n_way=aug.n_way,
    )


def rows_of_interpolated(task: InterpolatedTask, pool_rows: Sequence[TaskRows]) -> TaskRows:
    i, j = task.tasks
    nodes = np.union1d(pool_rows[i].nodes, pool_rows[j].nodes)
    src = {i: pool_rows[i].embed(nodes), j: pool_rows[j].embed(nodes)}

    def build(block: RecipeBlock, which: str) -> np.ndarray:
        if len(block) == 0:
            return np.zeros((0, nodes.size))
        refs = list(dict.fromkeys(block.first + block.second))
        slots = {ref: n for n, ref in enumerate(refs)}
        table = np.vstack(
            [
                src[ref[0]].prototype_coefficients(which, ref[1])
                if len(ref) == 2
                else src[ref[0]].class_rows(which, ref[1])[ref[2]]
                for ref in refs
            ]
        )
        a = np.fromiter(map(slots.__getitem__, block.first), dtype=np.int64, count=len(block))
        b = np.fromiter(map(slots.__getitem__, block.second), dtype=np.int64, count=len(block))
        lam = block.lams[:, None]
        return lam * table[a] + (1.0 - lam) * table[b]

    return TaskRows(
        nodes=nodes,
        support=build(task.support, "support"),
        support_labels=task.support_labels(),
        query=build(task.query, "query"),
        query_labels=task.query_labels(),
        n_way=task.n_way,
    )


@dataclass
class DualMixup:
    """One round of dual-level mixup over an original task pool."""

    augmented: list[AugmentedEpisode]
    interpolated: list[InterpolatedTask]
    tasks: list[TaskRows]  # D_all in coefficient form


def dual_mixup(
    pool: Sequence[Episode],
    config: MixupConfig,
    stream: SeedStream,
) -> DualMixup:
    """Within-task mixup on every pool task, then across-task mixup over the
    augmented pool, assembled into the final training set."""
    augmented = [within_task_mixup(ep, config, stream.child(0).child(t)) for t, ep in enumerate(pool)]
    pool_rows = [rows_of_episode(a) for a in augmented]
    t_aug = config.resolved_t_aug(len(pool))
    interpolated: list[InterpolatedTask] = []
    if t_aug > 0:
        across = across_task_mixup if config.across_mode == PROTOTYPE else across_task_mixup_instance
        interpolated = across(augmented, config, stream.child(1))
    tasks = list(pool_rows) if config.include_original else []
    tasks.extend(rows_of_interpolated(task, pool_rows) for task in interpolated)
    return DualMixup(augmented=augmented, interpolated=interpolated, tasks=tasks)
