"""Measurement graphs, formations and the quadratic cost operators.

A measurement graph stores, for each edge ``(i, j)`` with ``i < j``, a unit
vector ``gamma`` giving the measured line through ``t_i`` and ``t_j``. The
sign of ``gamma`` carries no information; only the projector ``gamma gamma^T``
is used downstream.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

log = logging.getLogger(__name__)

UNIT_TOL = 1e-12
LOAD_NORM_WARN = 1e-6
DEGENERATE_EDGE_TOL = 1e-9
DENSE_LAPLACIAN_MAX_N = 512


class InputError(ValueError):
    """Malformed or inconsistent user input."""


class DegenerateEdgeError(InputError):
    """An edge joins two (numerically) coincident points."""

    def __init__(self, i: int, j: int, dist: float):
        super().__init__(f"edge ({i}, {j}) joins coincident points (|t_i - t_j| = {dist:.3g})")
        self.pair = (i, j)


class SolverError(RuntimeError):
    """A numerical routine failed to produce a usable result."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MeasurementGraph:
    """Nodes ``0..n-1`` in ``R^d`` and edges carrying unit line directions.

    Attributes:
        d: ambient dimension (>= 2).
        n: number of nodes.
        edges: ``(m, 2)`` int array with ``edges[:, 0] < edges[:, 1]``.
        gammas: ``(m, d)`` array of unit vectors.
    """

    d: int
    n: int
    edges: np.ndarray
    gammas: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        gammas = np.asarray(self.gammas, dtype=float)
        gammas = gammas.reshape(len(edges), -1) if len(edges) else np.zeros((0, self.d))
        if self.d < 2:
            raise InputError(f"dimension d must be >= 2, got {self.d}")
        if self.n < 1:
            raise InputError(f"node count must be positive, got {self.n}")
        if len(edges) and gammas.shape[1] != self.d:
            raise InputError(f"gamma vectors have length {gammas.shape[1]}, expected {self.d}")
        if len(edges):
            if edges.min() < 0 or edges.max() >= self.n:
                raise InputError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                k = int(np.flatnonzero(edges[:, 0] == edges[:, 1])[0])
                raise InputError(f"self-loop at node {edges[k, 0]}")
            if np.any(edges[:, 0] > edges[:, 1]):
                raise InputError("edges must be stored with i < j")
            keys = edges[:, 0] * self.n + edges[:, 1]
            if len(np.unique(keys)) != len(keys):
                raise InputError("duplicate edge")
            norms = np.linalg.norm(gammas, axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_TOL):
                raise InputError("gamma vectors must have unit norm")
        object.__setattr__(self, "edges", _frozen(edges))
        object.__setattr__(self, "gammas", _frozen(gammas.reshape(len(edges), self.d)))

    @property
    def m(self) -> int:
        return len(self.edges)

    @classmethod
    def from_edges(cls, d: int, n: int, edges: Iterable[Sequence[int]],
                   gammas: Iterable[Sequence[float]], normalize: bool = True) -> "MeasurementGraph":
        """Build a graph, orienting pairs as ``i < j`` and normalizing gammas."""
        e = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        g = np.asarray(list(gammas), dtype=float).reshape(len(e), d) if len(e) else np.zeros((0, d))
        e = np.sort(e, axis=1)
        if normalize and len(g):
            nrm = np.linalg.norm(g, axis=1, keepdims=True)
            if np.any(nrm == 0):
                raise InputError("zero gamma vector")
            g = g / nrm
        return cls(d=d, n=n, edges=e, gammas=g)

    def subgraph(self, nodes: Iterable[int]) -> tuple["MeasurementGraph", np.ndarray]:
        """Induced subgraph on ``nodes`` (relabelled 0..k-1) and the label map."""
        nodes = np.array(sorted(set(int(v) for v in nodes)), dtype=np.int64)
        lut = -np.ones(self.n, dtype=np.int64)
        lut[nodes] = np.arange(len(nodes))
        keep = (lut[self.edges[:, 0]] >= 0) & (lut[self.edges[:, 1]] >= 0)
        sub = MeasurementGraph(self.d, len(nodes), lut[self.edges[keep]], self.gammas[keep])
        return sub, nodes

    def adjacency(self) -> sp.csr_matrix:
        i, j = self.edges.T
        a = sp.coo_matrix((np.ones(self.m), (i, j)), shape=(self.n, self.n))
        return (a + a.T).tocsr()

    def incidence(self) -> sp.csr_matrix:
        """Unsigned ``n x m`` vertex-edge incidence matrix."""
        rows = self.edges.T.ravel()
        cols = np.tile(np.arange(self.m), 2)
        return sp.csr_matrix((np.ones(2 * self.m), (rows, cols)), shape=(self.n, self.m))

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n)

    def is_connected(self) -> bool:
        if self.n == 1:
            return True
        ncomp, _ = csgraph.connected_components(self.adjacency(), directed=False)
        return ncomp == 1


@dataclass(frozen=True)
class LocationSet:
    """``n`` points in ``R^d`` stored as an ``(n, d)`` array."""

    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if t.ndim != 2:
            raise InputError("locations must be an (n, d) array")
        object.__setattr__(self, "t", _frozen(t))

    @property
    def n(self) -> int:
        return self.t.shape[0]

    @property
    def d(self) -> int:
        return self.t.shape[1]

    def stacked(self) -> np.ndarray:
        return self.t.ravel()

    def min_pairwise_distance(self) -> float:
        diff = self.t[:, None, :] - self.t[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        dist[np.diag_indices(self.n)] = np.inf
        return float(dist.min()) if self.n > 1 else np.inf


@dataclass(frozen=True)
class Formation:
    """A measurement graph together with its per-edge projectors ``gamma gamma^T``."""

    graph: MeasurementGraph
    projections: np.ndarray = field(init=False)

    def __post_init__(self):
        g = self.graph.gammas
        object.__setattr__(self, "projections", _frozen(np.einsum("ka,kb->kab", g, g)))

    @property
    def complements(self) -> np.ndarray:
        """Per-edge ``Q = I - gamma gamma^T``."""
        return np.eye(self.graph.d)[None] - self.projections


def line_projection(gamma: Sequence[float], tol: float = 1e-9) -> np.ndarray:
    """Return the rank-1 projector ``gamma gamma^T`` for a unit vector."""
    g = np.asarray(gamma, dtype=float)
    if abs(np.linalg.norm(g) - 1.0) > tol:
        raise InputError(f"gamma must be a unit vector (norm {np.linalg.norm(g):.6g})")
    return np.outer(g, g)


def formation_from_locations(locs: LocationSet, edge_list: Iterable[Sequence[int]],
                             tol: float = DEGENERATE_EDGE_TOL) -> Formation:
    """Noiseless formation whose lines pass through the given locations."""
    e = np.sort(np.asarray(list(edge_list), dtype=np.int64).reshape(-1, 2), axis=1)
    diff = locs.t[e[:, 0]] - locs.t[e[:, 1]]
    dist = np.linalg.norm(diff, axis=1)
    bad = np.flatnonzero(dist < tol)
    if len(bad):
        k = bad[0]
        raise DegenerateEdgeError(int(e[k, 0]), int(e[k, 1]), float(dist[k]))
    graph = MeasurementGraph(locs.d, locs.n, e, diff / dist[:, None])
    return Formation(graph)


@dataclass(frozen=True)
class CostOperators:
    """The Laplacian ``L`` and the graph data behind the constraint matrices.

    ``L`` is dense for ``n <= DENSE_LAPLACIAN_MAX_N`` and a block-sparse
    (BSR) matrix above. ``H = J_n (x) I_d`` is never formed; see ``trace_H``.
    """

    L: np.ndarray | sp.bsr_matrix
    d: int
    n: int
    edges: np.ndarray
    graph: MeasurementGraph

    @property
    def m(self) -> int:
        return len(self.edges)

    def dense_L(self) -> np.ndarray:
        return self.L.toarray() if sp.issparse(self.L) else np.asarray(self.L)

    def trace_H(self, T: np.ndarray) -> float:
        """``Tr(H T)`` for ``H = J_n (x) I_d``: the squared norm of the block sums."""
        n, d = self.n, self.d
        return float(np.einsum("ikjk->", T.reshape(n, d, n, d)))

    def quadratic(self, t: np.ndarray) -> float:
        """``t^T L t`` for a stacked location vector."""
        t = np.asarray(t, dtype=float).ravel()
        return float(t @ (self.L @ t))


def build_cost_operators(f: Formation | MeasurementGraph,
                         dense_max_n: int = DENSE_LAPLACIAN_MAX_N) -> CostOperators:
    """Assemble ``L`` with off-diagonal blocks ``-Q_ij`` and diagonal ``sum_k Q_ik``."""
    graph = f.graph if isinstance(f, Formation) else f
    form = f if isinstance(f, Formation) else Formation(f)
    n, d, e = graph.n, graph.d, graph.edges
    Q = form.complements
    i, j = e[:, 0], e[:, 1]
    if n <= dense_max_n:
        L4 = np.zeros((n, n, d, d))
        np.add.at(L4, (i, i), Q)
        np.add.at(L4, (j, j), Q)
        np.add.at(L4, (i, j), -Q)
        np.add.at(L4, (j, i), -Q)
        L = L4.transpose(0, 2, 1, 3).reshape(n * d, n * d)
    else:
        rows = np.concatenate([i, j, i, j, np.arange(n)])
        cols = np.concatenate([j, i, i, j, np.arange(n)])
        blocks = np.concatenate([-Q, -Q, Q, Q, np.zeros((n, d, d))])
        order = np.lexsort((cols, rows))
        rows, cols, blocks = rows[order], cols[order], blocks[order]
        key = rows * n + cols
        uniq, start = np.unique(key, return_index=True)
        summed = np.add.reduceat(blocks, start, axis=0)
        ur, uc = uniq // n, uniq % n
        indptr = np.searchsorted(ur, np.arange(n + 1))
        L = sp.bsr_matrix((summed, uc, indptr), shape=(n * d, n * d))
    return CostOperators(L=L, d=d, n=n, edges=e, graph=graph)


def make_rng(seed: int | np.random.SeedSequence | None) -> np.random.Generator:
    """Counter-based Philox generator; a SeedSequence may be passed to derive streams."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def translation_basis(n: int, d: int) -> np.ndarray:
    """Orthonormal ``(dn, d)`` basis of the all-equal translations ``1_n (x) e_k``."""
    return np.kron(np.ones((n, 1)), np.eye(d)) / np.sqrt(n)


# ---------------------------------------------------------------- JSON io

def _parse_json_text(text: str, source: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{source}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def read_json(path: str | Path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    return _parse_json_text(text, str(path))


def graph_from_dict(obj: dict) -> tuple[MeasurementGraph, LocationSet | None]:
    """Parse the dataset format ``{"d", "n", "edges", "ground_truth"?}``."""
    if not isinstance(obj, dict):
        raise InputError("dataset must be a JSON object")
    allowed = {"d", "n", "edges", "ground_truth"}
    extra = set(obj) - allowed
    if extra:
        raise InputError(f"unknown dataset fields: {sorted(extra)}")
    try:
        d, n, raw = int(obj["d"]), int(obj["n"]), obj["edges"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"dataset needs integer 'd', 'n' and an 'edges' list ({exc})") from exc
    pairs, gammas = [], []
    for k, e in enumerate(raw):
        try:
            i, j, g = int(e["i"]), int(e["j"]), np.asarray(e["gamma"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"edge {k}: expected fields i, j, gamma") from exc
        if g.shape != (d,):
            raise InputError(f"edge {k}: gamma must have length {d}")
        nrm = np.linalg.norm(g)
        if nrm == 0 or not np.isfinite(nrm):
            raise InputError(f"edge {k}: gamma is zero or non-finite")
        if abs(nrm - 1.0) > LOAD_NORM_WARN:
            log.warning("edge %d (%d, %d): gamma norm %.6g normalized", k, i, j, nrm)
        pairs.append((min(i, j), max(i, j)))
        gammas.append(g / nrm)
    graph = MeasurementGraph(d, n, np.asarray(pairs, dtype=np.int64).reshape(-1, 2),
                             np.asarray(gammas, dtype=float).reshape(-1, d))
    truth = None
    if obj.get("ground_truth") is not None:
        gt = np.asarray(obj["ground_truth"], dtype=float)
        if gt.shape != (n, d):
            raise InputError(f"ground_truth must be {n} x {d}")
        truth = LocationSet(gt)
    return graph, truth


def graph_to_dict(graph: MeasurementGraph, truth: LocationSet | None = None) -> dict:
    out = {
        "d": graph.d,
        "n": graph.n,
        "edges": [{"i": int(i), "j": int(j), "gamma": [float(x) for x in g]}
                  for (i, j), g in zip(graph.edges, graph.gammas)],
    }
    if truth is not None:
        out["ground_truth"] = truth.t.tolist()
    return out


def load_graph(path: str | Path) -> tuple[MeasurementGraph, LocationSet | None]:
    return graph_from_dict(read_json(path))


def save_graph(path: str | Path, graph: MeasurementGraph, truth: LocationSet | None = None) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(graph, truth), indent=1))
