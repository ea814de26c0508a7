"""Stochastic-block-model benchmark with Gaussian class-conditional features."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from dualmix.episodes import ClassSplit
from dualmix.errors import ConfigError
from dualmix.graph import SparseGraph, load_graph, write_dataset

SPLITS_FILE = "splits.json"


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 10
    nodes_per_class: int = 60
    feature_dim: int = 32
    signal_dim: int = 8
    p_in: float = 0.08
    p_out: float = 0.002
    separation: float = 4.0
    noise: float = 1.0
    nuisance_noise: float | None = 3.0  # noise on the non-signal coordinates; None means ``noise``
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.nodes_per_class < 1 or self.feature_dim < 1:
            raise ConfigError("n_classes, nodes_per_class and feature_dim must be positive")
        if not 1 <= self.signal_dim <= self.feature_dim:
            raise ConfigError(f"signal_dim must lie in [1, feature_dim], got {self.signal_dim}")
        if not 0.0 <= self.p_out <= self.p_in <= 1.0:
            raise ConfigError(f"need 0 <= p_out <= p_in <= 1, got p_in={self.p_in}, p_out={self.p_out}")
        if self.separation < 0 or self.noise < 0 or (self.nuisance_noise is not None and self.nuisance_noise < 0):
            raise ConfigError("separation and noise must be non-negative")

    @classmethod
    def from_json(cls, raw: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown synth keys: {unknown}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> dict:
        return asdict(self)


def class_means(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Class means as random unit directions in the first ``signal_dim``
    coordinates, scaled by ``separation / sqrt(2)``.

    Two independent unit vectors are sqrt(2) apart on average, so mean
    pairwise distance is about ``separation``. All classes share the one
    signal subspace, which is what lets training classes teach anything
    about unseen ones; the remaining coordinates carry only noise.
    """
    dirs = np.zeros((spec.n_classes, spec.feature_dim))
    raw = rng.standard_normal((spec.n_classes, spec.signal_dim))
    dirs[:, : spec.signal_dim] = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return dirs * spec.separation / np.sqrt(2.0)


def even_split(n_classes: int) -> ClassSplit:
    """Thirds for 15 or more classes, otherwise halves with no validation classes."""
    ids = list(range(n_classes))
    if n_classes >= 15:
        a = n_classes // 3
        b = (n_classes - a) // 2
        return ClassSplit(tuple(ids[:a]), tuple(ids[a : a + b]), tuple(ids[a + b :]))
    half = n_classes // 2
    return ClassSplit(tuple(ids[:half]), (), tuple(ids[half:]))


def generate(spec: SynthSpec) -> tuple[SparseGraph, ClassSplit]:
    rng = np.random.default_rng(spec.seed)
    labels = np.repeat(np.arange(spec.n_classes), spec.nodes_per_class)
    n = labels.size
    means = class_means(spec, rng)
    scale = np.full(spec.feature_dim, spec.noise)
    if spec.nuisance_noise is not None:
        scale[spec.signal_dim :] = spec.nuisance_noise
    features = means[labels] + scale * rng.standard_normal((n, spec.feature_dim))

    # upper-triangle Bernoulli draws, block by block
    rows, cols = [], []
    bounds = np.arange(spec.n_classes + 1) * spec.nodes_per_class
    for a in range(spec.n_classes):
        for b in range(a, spec.n_classes):
            p = spec.p_in if a == b else spec.p_out
            if p == 0:
                continue
            hit = rng.random((spec.nodes_per_class, spec.nodes_per_class)) < p
            if a == b:
                hit = np.triu(hit, k=1)
            r, c = np.nonzero(hit)
            rows.append(r + bounds[a])
            cols.append(c + bounds[b])
    if rows:
        edges = np.column_stack([np.concatenate(rows), np.concatenate(cols)])
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
    graph = load_graph(edges, features, labels)
    return graph, even_split(spec.n_classes)


def write_split(split: ClassSplit, out_dir: str | Path) -> None:
    Path(out_dir, SPLITS_FILE).write_text(json.dumps(split.to_json()) + "\n")


def synth(spec: SynthSpec, out_dir: str | Path) -> tuple[SparseGraph, ClassSplit]:
    graph, split = generate(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(graph, out)
    write_split(split, out)
    return graph, split

