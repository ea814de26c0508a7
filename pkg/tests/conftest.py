from __future__ import annotations

import numpy as np
import pytest

from dualmix.graph import load_graph


def random_graph(rng: np.random.Generator, n: int, d: int = 3, p: float = 0.4, n_classes: int = 2):
    upper = np.triu(rng.random((n, n)) < p, k=1)
    edges = np.argwhere(upper)
    feats = rng.standard_normal((n, d))
    labels = np.arange(n) % n_classes
    return load_graph(edges, feats, labels)


def dense_normalized(graph) -> np.ndarray:
    """Straight dense evaluation of D^-1/2 (A + I) D^-1/2."""
    A = graph.adjacency.toarray() + np.eye(graph.n_nodes)
    d = A.sum(axis=1)
    return np.diag(d**-0.5) @ A @ np.diag(d**-0.5)


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        up = f()
        x[i] = old - step
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(number, passed, detail)``."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def record(number, passed: bool | None, detail: str) -> None:
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        line = f"criterion {number}: {status} {detail}"
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


def binary_instance(rng: np.random.Generator, m: int = 8, h: int = 4):
    """Random binary task: ``m`` queries, two prototypes and a base ``theta``."""
    return rng.standard_normal((m, h)), rng.standard_normal(h), rng.standard_normal(h), rng.standard_normal(h)
