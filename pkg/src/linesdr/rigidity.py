"""Generic parallel rigidity: randomized test, counting certificate, rigid components."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse import csgraph

from .core import (DEGENERATE_EDGE_TOL, DegenerateEdgeError, InputError, LocationSet,
                   MeasurementGraph, make_rng)

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-8
DENSE_MAX_N = 64
LAMAN_MAX_N = 8
N_NULL_SAMPLES = 8
SIGNATURE_RTOL = 1e-6


@dataclass(frozen=True)
class RigidityReport:
    verdict: str  # "rigid" | "flexible"
    dimension: int
    smallest_eigenvalue: float
    threshold: float
    seed: int | None
    components: list[list[int]] = field(default_factory=list)

    @property
    def rigid(self) -> bool:
        return self.verdict == "rigid"

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "tested_dimension": self.dimension,
            "smallest_eigenvalue": self.smallest_eigenvalue,
            "threshold": self.threshold,
            "components": [list(map(int, c)) for c in self.components],
            "seed": self.seed,
        }


def _edge_projectors(edges: np.ndarray, p: np.ndarray) -> np.ndarray:
    diff = p[edges[:, 0]] - p[edges[:, 1]]
    dist = np.linalg.norm(diff, axis=1)
    bad = np.flatnonzero(dist < DEGENERATE_EDGE_TOL)
    if len(bad):
        k = bad[0]
        raise DegenerateEdgeError(int(edges[k, 0]), int(edges[k, 1]), float(dist[k]))
    g = diff / dist[:, None]
    return np.eye(p.shape[1])[None] - np.einsum("ka,kb->kab", g, g)


def rigidity_matrix(graph: MeasurementGraph, p: LocationSet | np.ndarray) -> sp.csr_matrix:
    """Sparse ``(d m) x (d n)`` matrix whose edge block is ``[.. Q .. -Q ..]``.

    ``Q = I - Gamma_p(i, j)`` is built from the directions of ``p`` (the
    measured gammas of ``graph`` are not used), so ``R q = 0`` exactly when
    ``q`` is a parallel formation of ``p``.
    """
    p = np.asarray(p.t if isinstance(p, LocationSet) else p, dtype=float)
    d, m = graph.d, graph.m
    if p.shape != (graph.n, d):
        raise InputError(f"p must be {graph.n} x {d}")
    Q = _edge_projectors(graph.edges, p)
    r = np.arange(m)[:, None, None] * d + np.arange(d)[None, :, None]
    ci = graph.edges[:, 0][:, None, None] * d + np.arange(d)[None, None, :]
    cj = graph.edges[:, 1][:, None, None] * d + np.arange(d)[None, None, :]
    r = np.broadcast_to(r, Q.shape)
    rows = np.concatenate([r.ravel(), r.ravel()])
    cols = np.concatenate([np.broadcast_to(ci, Q.shape).ravel(), np.broadcast_to(cj, Q.shape).ravel()])
    vals = np.concatenate([Q.ravel(), -Q.ravel()])
    return sp.csr_matrix((vals, (rows, cols)), shape=(d * m, d * graph.n))


def _trivial_basis(p: np.ndarray) -> np.ndarray:
    """Columns ``1_n (x) e_k`` and ``p``; ``p`` is rescaled to the norm of the others."""
    n, d = p.shape
    U = np.zeros((n * d, d + 1))
    U[:, :d] = np.kron(np.ones((n, 1)), np.eye(d))
    U[:, d] = p.ravel() * (np.sqrt(n) / np.linalg.norm(p))
    return U


def _w_operator(R: sp.csr_matrix, U: np.ndarray):
    RtR = (R.T @ R).tocsr()
    return RtR, lambda x: RtR @ x + U @ (U.T @ x)


def _smallest_eig(RtR: sp.csr_matrix, U: np.ndarray, dense: bool) -> tuple[float, float]:
    """Return ``(lambda_min(W), lambda_max(W))``."""
    N = RtR.shape[0]
    if dense or N <= 3:
        W = RtR.toarray() + U @ U.T
        w = np.linalg.eigvalsh(W)
        return float(w[0]), float(w[-1])
    Wop = spla.LinearOperator((N, N), matvec=lambda x: RtR @ x + U @ (U.T @ x), dtype=float)
    lmax = float(spla.eigsh(Wop, k=1, which="LA", return_eigenvectors=False, tol=1e-12)[0])
    shifted = spla.LinearOperator((N, N), matvec=lambda x: lmax * x - Wop @ x, dtype=float)
    top = float(spla.eigsh(shifted, k=1, which="LA", return_eigenvectors=False, tol=1e-14)[0])
    return lmax - top, lmax


def _random_p(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    p = rng.standard_normal((n, d))
    return p - p.mean(axis=0)


def test_parallel_rigidity(graph: MeasurementGraph, d: int | None = None, seed: int | None = 0,
                           epsilon: float = DEFAULT_EPS, components: bool = False,
                           dense_max_n: int = DENSE_MAX_N) -> RigidityReport:
    """Randomized generic parallel rigidity test.

    ``epsilon`` is relative: the graph is declared rigid when
    ``lambda_min(W) > epsilon * lambda_max(W)``.
    """
    d = graph.d if d is None else int(d)
    if graph.n < 2:
        raise InputError("rigidity test needs at least 2 nodes")
    if d != graph.d:
        graph = MeasurementGraph(d, graph.n, graph.edges, _placeholder_gammas(graph.m, d))
    rng = make_rng(seed)
    if not graph.is_connected():
        comps = extract_max_rigid_components(graph, d, seed) if components else []
        return RigidityReport("flexible", d, 0.0, 0.0, seed, comps)
    p = _random_p(graph.n, d, rng)
    R = rigidity_matrix(graph, p)
    U = _trivial_basis(p)
    lmin, lmax = _smallest_eig((R.T @ R).tocsr(), U, graph.n < dense_max_n)
    thr = epsilon * lmax
    verdict = "rigid" if lmin > thr else "flexible"
    comps: list[list[int]] = []
    if components:
        if verdict == "rigid":
            comps = [sorted(set(graph.edges.ravel().tolist()))]
        else:
            comps = extract_max_rigid_components(graph, d, seed)
    return RigidityReport(verdict, d, lmin, thr, seed, comps)


test_parallel_rigidity.__test__ = False  # not a pytest test despite the name


def is_rigid(graph: MeasurementGraph, d: int | None = None, seed: int | None = 0) -> bool:
    return test_parallel_rigidity(graph, d, seed).rigid


def _placeholder_gammas(m: int, d: int) -> np.ndarray:
    g = np.zeros((m, d))
    g[:, 0] = 1.0
    return g


def graph_from_pairs(n: int, pairs, d: int = 2) -> MeasurementGraph:
    """Graph with placeholder lines, for purely combinatorial questions."""
    e = np.sort(np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2), axis=1)
    return MeasurementGraph(d, n, e, _placeholder_gammas(len(e), d))


# ---------------------------------------------------------------- components

def _null_signatures(graph: MeasurementGraph, p: np.ndarray, rng: np.random.Generator,
                     k: int, epsilon: float) -> np.ndarray | None:
    """Per-edge scale factors ``s_e`` of ``k`` random non-trivial parallel formations."""
    R = rigidity_matrix(graph, p)
    U = _trivial_basis(p)
    W = (R.T @ R).toarray() + U @ U.T
    w, V = np.linalg.eigh(W)
    null = V[:, w <= epsilon * w[-1]]
    if null.shape[1] == 0:
        return None
    q = (null @ rng.standard_normal((null.shape[1], k))).reshape(graph.n, graph.d, k)
    i, j = graph.edges.T
    dp = p[i] - p[j]
    dq = q[i] - q[j]
    return np.einsum("ea,eak->ek", dp, dq) / np.sum(dp * dp, axis=1)[:, None]


def _cluster_rows(S: np.ndarray, rtol: float) -> np.ndarray:
    scale = max(np.abs(S).max(), 1e-300)
    labels = -np.ones(len(S), dtype=np.int64)
    reps: list[np.ndarray] = []
    for e in range(len(S)):
        for c, r in enumerate(reps):
            if np.all(np.abs(S[e] - r) <= rtol * scale):
                labels[e] = c
                break
        else:
            labels[e] = len(reps)
            reps.append(S[e])
    return labels


def extract_max_rigid_components(graph: MeasurementGraph, d: int | None = None,
                                 seed: int | None = 0, n_samples: int = N_NULL_SAMPLES,
                                 rtol: float = SIGNATURE_RTOL,
                                 epsilon: float = DEFAULT_EPS) -> list[list[int]]:
    """Vertex sets of the maximal parallel rigid components.

    Within a maximal rigid component every parallel formation is a scaled and
    translated copy, so the per-edge scale factor of a random null-space
    formation is constant on the component and (with probability one)
    different across components. Edges are grouped by these factors; a
    vertex shared by two components is listed in both.
    """
    d = graph.d if d is None else int(d)
    if graph.m == 0:
        return []
    if d != graph.d:
        graph = MeasurementGraph(d, graph.n, graph.edges, _placeholder_gammas(graph.m, d))
    rng = make_rng(seed)
    out: list[list[int]] = []
    ncomp, lab = csgraph.connected_components(graph.adjacency(), directed=False)
    for c in range(ncomp):
        nodes = np.flatnonzero(lab == c)
        if len(nodes) < 2:
            continue
        sub, idx = graph.subgraph(nodes)
        p = _random_p(sub.n, d, rng)
        S = _null_signatures(sub, p, rng, n_samples, epsilon)
        if S is None:
            out.append(idx.tolist())
            continue
        labels = _cluster_rows(S, rtol)
        for c_lab in np.unique(labels):
            e = sub.edges[labels == c_lab]
            # split clusters into connected pieces
            verts = np.unique(e)
            lut = {v: k for k, v in enumerate(verts)}
            a = sp.coo_matrix((np.ones(len(e)), ([lut[v] for v in e[:, 0]], [lut[v] for v in e[:, 1]])),
                              shape=(len(verts), len(verts)))
            nc, pl = csgraph.connected_components(a, directed=False)
            for piece in range(nc):
                out.append(sorted(idx[verts[pl == piece]].tolist()))
    out = sorted({tuple(c) for c in out})
    return [list(c) for c in out]


# ---------------------------------------------------------------- counting certificate

def count_laman_certificate(graph: MeasurementGraph | list, d: int, n: int | None = None,
                            max_n: int = LAMAN_MAX_N) -> bool:
    """Exact combinatorial rigidity check by the counting condition.

    Decides whether ``d - 1`` copies of every edge contain a multiset ``D`` with
    ``|D| = d|V| - (d + 1)`` whose every non-empty subset ``D'`` spans at most
    ``d|V(D')| - (d + 1)`` copies. The subsets satisfying the count form a
    matroid, so a greedy scan over the copies finds a maximum one. The check
    enumerates all vertex subsets and is therefore limited to small graphs.
    """
    if isinstance(graph, MeasurementGraph):
        n, pairs = graph.n, [tuple(e) for e in graph.edges.tolist()]
    else:
        if n is None:
            raise InputError("n is required with a plain edge list")
        pairs = [tuple(sorted(e)) for e in graph]
    if n > max_n:
        raise InputError(f"counting certificate limited to n <= {max_n} (got {n})")
    if n < 2:
        return False
    target = d * n - (d + 1)
    masks = np.arange(1 << n)
    size = np.array([bin(x).count("1") for x in masks])
    cap = d * size - (d + 1)
    count = np.zeros(1 << n, dtype=np.int64)
    chosen = 0
    for (i, j) in pairs:
        inside = ((masks >> i) & 1).astype(bool) & ((masks >> j) & 1).astype(bool)
        for _ in range(d - 1):
            if np.all(count[inside] + 1 <= cap[inside]):
                count[inside] += 1
                chosen += 1
    return chosen == target


def brute_force_rank(graph: MeasurementGraph, p: np.ndarray) -> int:
    """Numerical rank of the rigidity matrix by SVD (small graphs)."""
    R = rigidity_matrix(graph, p).toarray()
    s = np.linalg.svd(R, compute_uv=False)
    return int(np.sum(s > s.max() * 1e-9)) if len(s) else 0


def all_pairs(n: int):
    return list(itertools.combinations(range(n), 2))
