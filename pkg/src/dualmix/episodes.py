"""Class splits, reproducible seed streams and N-way K-shot episode sampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from dualmix.errors import CapacityError, SplitError

log = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One round of the splitmix64 output function (a 64-bit finalizer)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class SeedStream:
    """A purpose-scoped random stream.

    The 64-bit state is ``splitmix64(splitmix64(master) ^ index)``; draws come
    from numpy's PCG64 seeded with that state. Children mix their own index
    into the parent's state the same way, so a stream's draws depend only on
    its path from the master seed, never on what other streams consumed.
    """

    master: int
    index: int = 0

    @property
    def state(self) -> int:
        return splitmix64(splitmix64(self.master & _MASK64) ^ (self.index & _MASK64))

    def child(self, index: int) -> "SeedStream":
        return SeedStream(self.state, index)

    def rng(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.state))


# stream indices under the run's master seed
STREAM_INIT = 1
STREAM_POOL = 2
STREAM_MIXUP = 3
STREAM_VALIDATION = 4
STREAM_TEST = 5
STREAM_TRAIN_EVAL = 6
STREAM_THEORY = 7


@dataclass(frozen=True)
class ClassSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        names = ("train", "val", "test")
        sets = [set(getattr(self, n)) for n in names]
        for i in range(3):
            if len(sets[i]) != len(getattr(self, names[i])):
                raise SplitError(f"duplicate class id in {names[i]} list")
            for j in range(i + 1, 3):
                overlap = sets[i] & sets[j]
                if overlap:
                    raise SplitError(f"classes {sorted(overlap)} appear in both {names[i]} and {names[j]}")

    def validate_against(self, classes: Iterable[int]) -> "ClassSplit":
        known = set(int(c) for c in classes)
        unknown = sorted(set(self.train + self.val + self.test) - known)
        if unknown:
            raise SplitError(f"unknown class ids {unknown}")
        return self

    def to_json(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}

    @property
    def counts(self) -> str:
        return f"{len(self.train)}/{len(self.val)}/{len(self.test)}"


def load_split(path: str | Path, classes: Iterable[int] | None = None) -> ClassSplit:
    """Read ``splits.json`` (``{"train": [...], "val": [...], "test": [...]}``)."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SplitError(f"cannot read split file {path}: {exc}") from None
    return split_from_dict(raw, classes)


def split_from_dict(raw: dict, classes: Iterable[int] | None = None) -> ClassSplit:
    if not isinstance(raw, dict):
        raise SplitError("split must be a JSON object")
    lists = {}
    for key in ("train", "val", "test"):
        value = raw.get(key, [])
        if not isinstance(value, list) or not all(isinstance(c, int) and not isinstance(c, bool) for c in value):
            raise SplitError(f"split '{key}' must be a list of integer class ids")
        lists[key] = tuple(value)
    extra = set(raw) - {"train", "val", "test"}
    if extra:
        raise SplitError(f"unexpected keys in split: {sorted(extra)}")
    split = ClassSplit(**lists)
    return split.validate_against(classes) if classes is not None else split


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task.

    ``support`` and ``query`` hold ``(node id, local class)`` pairs; local
    class ``k`` stands for global class ``classes[k]``.
    """

    support: tuple[tuple[int, int], ...]
    query: tuple[tuple[int, int], ...]
    classes: tuple[int, ...]
    k_shot: int
    m_query: int

    @property
    def n_way(self) -> int:
        return len(self.classes)

    def support_nodes(self) -> np.ndarray:
        return np.array([n for n, _ in self.support], dtype=np.int64)

    def support_labels(self) -> np.ndarray:
        return np.array([c for _, c in self.support], dtype=np.int64)

    def query_nodes(self) -> np.ndarray:
        return np.array([n for n, _ in self.query], dtype=np.int64)

    def query_labels(self) -> np.ndarray:
        return np.array([c for _, c in self.query], dtype=np.int64)

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes),
            "support": [list(p) for p in self.support],
            "query": [list(p) for p in self.query],
        }


def eligible_classes(labels: np.ndarray, classes: Sequence[int], needed: int) -> list[int]:
    """Classes with at least ``needed`` nodes; the rest are skipped with a warning."""
    counts = np.bincount(labels, minlength=max(classes, default=-1) + 1) if len(labels) else np.zeros(0)
    keep, dropped = [], []
    for c in sorted(int(c) for c in classes):
        (keep if c < len(counts) and counts[c] >= needed else dropped).append(c)
    if dropped:
        log.warning("excluding classes %s with fewer than %d nodes", dropped, needed)
    return keep


def sample_episode(
    labels: np.ndarray,
    classes: Sequence[int],
    n_way: int,
    k_shot: int,
    m_query: int,
    stream: SeedStream,
) -> Episode:
    labels = np.asarray(labels)
    needed = k_shot + m_query
    eligible = eligible_classes(labels, classes, needed)
    if len(eligible) < n_way:
        short = sorted(set(int(c) for c in classes) - set(eligible))
        detail = f"; classes {short} have fewer than {needed} nodes" if short else ""
        raise CapacityError(f"need {n_way} classes with >= {needed} nodes, only {len(eligible)} available{detail}")
    rng = stream.rng()
    chosen = rng.choice(np.array(eligible), size=n_way, replace=False)
    support, query = [], []
    for local, cls in enumerate(chosen):
        members = np.flatnonzero(labels == cls)
        picked = rng.choice(members, size=needed, replace=False)
        support.extend((int(n), local) for n in picked[:k_shot])
        query.extend((int(n), local) for n in picked[k_shot:])
    return Episode(
        support=tuple(support),
        query=tuple(query),
        classes=tuple(int(c) for c in chosen),
        k_shot=k_shot,
        m_query=m_query,
    )


def build_task_pool(
    labels: np.ndarray,
    classes: Sequence[int],
    n_tasks: int,
    n_way: int,
    k_shot: int,
    m_query: int,
    stream: SeedStream,
) -> list[Episode]:
    """``n_tasks`` episodes; task ``t`` draws from ``stream.child(t)``."""
    return [sample_episode(labels, classes, n_way, k_shot, m_query, stream.child(t)) for t in range(n_tasks)]
