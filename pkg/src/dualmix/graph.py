"""Sparse graph container, symmetric normalization and feature propagation.

The propagated matrix ``P = A_norm^hops @ Z`` has no trainable parameters, so
it is computed once per dataset and cached next to it.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

from dualmix.errors import FormatError, ShapeError

log = logging.getLogger(__name__)

EDGES_FILE = "edges.tsv"
FEATURES_FILE = "features.csv"
LABELS_FILE = "labels.tsv"


@dataclass(frozen=True)
class SparseGraph:
    """Undirected, unweighted graph with node features and labels.

    ``adjacency`` is a symmetric CSR matrix with unit entries, sorted indices
    and no stored diagonal.
    """

    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_edges(self) -> int:
        """Number of undirected edges."""
        return self.adjacency.nnz // 2

    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def edge_list(self) -> np.ndarray:
        """Each undirected edge once as ``(u, v)`` with ``u < v``, lexicographically sorted."""
        upper = sp.triu(self.adjacency, k=1).tocsr()
        upper.sort_indices()
        rows = np.repeat(np.arange(self.n_nodes), np.diff(upper.indptr))
        return np.column_stack([rows, upper.indices]).astype(np.int64)


@dataclass(frozen=True)
class NormalizedAdjacency:
    values: sp.csr_matrix
    degrees: np.ndarray  # self-loop augmented degrees, integer valued

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class PropagatedFeatures:
    values: np.ndarray
    hops: int

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]


def load_graph(
    edges: Iterable[tuple[int, int]] | np.ndarray,
    features: np.ndarray,
    labels: Mapping[int, int] | np.ndarray | Iterable[int],
) -> SparseGraph:
    """Build a :class:`SparseGraph`; the node count is the number of feature rows.

    Directed or duplicated edges are symmetrized and deduplicated silently,
    self-loops are dropped. Every node needs a non-negative label.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise FormatError(f"feature matrix must be 2-D, got shape {feats.shape}")
    if not np.all(np.isfinite(feats)):
        bad = int(np.argwhere(~np.isfinite(feats))[0, 0])
        raise FormatError(f"non-finite feature value in row {bad}")
    n = feats.shape[0]

    pairs = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges)
    if pairs.size == 0:
        pairs = np.zeros((0, 2), dtype=np.int64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise FormatError(f"edge list must have two columns, got shape {pairs.shape}")
    if not np.issubdtype(pairs.dtype, np.integer):
        if not np.all(np.equal(np.mod(pairs, 1), 0)):
            raise FormatError("edge endpoints must be integers")
        pairs = pairs.astype(np.int64)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        bad = pairs[(pairs < 0) | (pairs >= n)][0]
        raise FormatError(f"edge references node {int(bad)} but graph has {n} nodes")

    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    adj.sum_duplicates()
    adj.data[:] = 1.0
    adj.sort_indices()

    lab = _labels_array(labels, n)
    feats.setflags(write=False)
    lab.setflags(write=False)
    return SparseGraph(adjacency=adj, features=feats, labels=lab)


def _labels_array(labels, n: int) -> np.ndarray:
    if isinstance(labels, Mapping):
        out = np.full(n, -1, dtype=np.int64)
        for node, cls in labels.items():
            node = int(node)
            if not 0 <= node < n:
                raise FormatError(f"label for node {node} but graph has {n} nodes")
            out[node] = int(cls)
    else:
        out = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels)
        if out.shape != (n,):
            raise FormatError(f"expected {n} labels, got {out.shape[0] if out.ndim else 0}")
        out = out.astype(np.int64)
    if np.any(out < 0):
        raise FormatError(f"node {int(np.argmax(out < 0))} has no non-negative label")
    return out


def normalize(graph: SparseGraph) -> NormalizedAdjacency:
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the degree matrix of ``A + I``."""
    n = graph.n_nodes
    a_hat = (graph.adjacency + sp.identity(n, format="csr")).tocsr()
    a_hat.sort_indices()
    degrees = np.asarray(a_hat.sum(axis=1)).ravel()
    # value(u, v) = (d_u * d_v)^-1/2; the degree product is an exact integer
    rows = np.repeat(np.arange(n), np.diff(a_hat.indptr))
    values = a_hat.copy()
    values.data = 1.0 / np.sqrt(degrees[rows] * degrees[a_hat.indices])
    return NormalizedAdjacency(values=values, degrees=degrees.astype(np.int64))


def propagate(adj: NormalizedAdjacency, Z: np.ndarray, hops: int) -> PropagatedFeatures:
    """Apply the normalized adjacency ``hops`` times by sparse-dense products."""
    Z = np.asarray(Z, dtype=np.float64)
    if hops < 0:
        raise ShapeError(f"hops must be non-negative, got {hops}")
    if Z.ndim != 2 or Z.shape[0] != adj.n_nodes:
        raise ShapeError(f"feature matrix has shape {Z.shape}, adjacency is {adj.n_nodes}x{adj.n_nodes}")
    P = Z.copy()
    for _ in range(hops):
        P = adj.values @ P
    P = np.ascontiguousarray(P)
    P.setflags(write=False)
    return PropagatedFeatures(values=P, hops=hops)


# --- dataset directory format ------------------------------------------------


def read_dataset(data_dir: str | Path) -> SparseGraph:
    data_dir = Path(data_dir)
    for name in (EDGES_FILE, FEATURES_FILE, LABELS_FILE):
        if not (data_dir / name).is_file():
            raise FormatError(f"missing {name} in {data_dir}")

    features = _read_matrix(data_dir / FEATURES_FILE, delimiter=",", dtype=np.float64)
    edges = _read_matrix(data_dir / EDGES_FILE, delimiter="\t", dtype=np.int64, columns=2)
    label_rows = _read_matrix(data_dir / LABELS_FILE, delimiter="\t", dtype=np.int64, columns=2)
    labels = {int(node): int(cls) for node, cls in label_rows}
    if len(labels) != len(label_rows):
        raise FormatError("duplicate node id in labels.tsv")
    return load_graph(edges, features, labels)


def _read_matrix(path: Path, delimiter: str, dtype, columns: int | None = None) -> np.ndarray:
    convert = int if np.issubdtype(dtype, np.integer) else float
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(delimiter)
            if columns is not None and len(parts) != columns:
                raise FormatError(f"{path.name}:{lineno}: expected {columns} fields, got {len(parts)}")
            try:
                rows.append([convert(p) for p in parts])
            except ValueError as exc:
                raise FormatError(f"{path.name}:{lineno}: {exc}") from None
    if not rows:
        return np.zeros((0, columns or 0), dtype=dtype)
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise FormatError(f"{path.name}: ragged rows")
    return np.asarray(rows, dtype=dtype)


def write_dataset(graph: SparseGraph, data_dir: str | Path) -> Path:
    """Serialize ``graph`` into the three-file directory format.

    Output is canonical (sorted edges, shortest round-trip float repr), so
    reading and re-writing a dataset reproduces it byte for byte.
    """
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    with (data_dir / EDGES_FILE).open("w") as fh:
        for u, v in graph.edge_list():
            fh.write(f"{u}\t{v}\n")
    with (data_dir / FEATURES_FILE).open("w") as fh:
        for row in graph.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with (data_dir / LABELS_FILE).open("w") as fh:
        for node, cls in enumerate(graph.labels):
            fh.write(f"{node}\t{int(cls)}\n")
    return data_dir


def graph_fingerprint(graph: SparseGraph) -> str:
    """Content hash of the adjacency structure and features."""
    h = hashlib.sha256()
    for arr in (graph.adjacency.indptr, graph.adjacency.indices, graph.features):
        h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(arr.shape).encode())
    return h.hexdigest()


def cached_propagation(
    graph: SparseGraph,
    hops: int,
    cache_dir: str | Path | None = None,
    adj: NormalizedAdjacency | None = None,
) -> PropagatedFeatures:
    """Propagated features, reused from ``cache_dir/propagated_l{hops}.npy`` when
    its recorded fingerprint matches the graph."""
    if cache_dir is not None:
        path = Path(cache_dir) / f"propagated_l{hops}.npy"
        key_path = path.with_suffix(".sha256")
        key = graph_fingerprint(graph)
        if path.is_file() and key_path.is_file():
            if key_path.read_text().strip() == key:
                values = np.load(path)
                values.setflags(write=False)
                return PropagatedFeatures(values=values, hops=hops)
            log.warning("ignoring stale propagation cache %s", path)
    result = propagate(adj if adj is not None else normalize(graph), graph.features, hops)
    if cache_dir is not None:
        try:
            np.save(path, result.values)
            key_path.write_text(key + "\n")
        except OSError as exc:
            log.warning("could not write propagation cache: %s", exc)
    return result
