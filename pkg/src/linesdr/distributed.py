"""Divide-and-stitch location estimation for large graphs.

The graph is cut into overlapping patches of bounded size, each patch that is
parallel rigid is solved on its own, and the local solutions are combined:
pairwise registration gives relative signed scales, their signs are
synchronized by a leading eigenvector, and a robust sum-of-norms fit with
scales bounded below by one places all patches in a common frame.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import lsq_linear
from scipy.sparse import csgraph

from . import rigidity
from .core import CostOperators, InputError, LocationSet, MeasurementGraph, SolverError, build_cost_operators
from .sdr import SdrConfig, adm_solve

log = logging.getLogger(__name__)

MIN_OVERLAP = 2
STITCH_DELTA = 1e-8
STITCH_RTOL = 1e-9
STITCH_MAX_SWEEPS = 5000
SIGN_ZERO_TOL = 1e-10


class DegenerateRegistrationError(InputError):
    pass


@dataclass
class PatchDecomposition:
    """Patches (sorted node arrays) and the overlap graph between them."""

    patches: list[np.ndarray]
    patch_edges: list[tuple[int, int]]
    dropped_nodes: list[int] = field(default_factory=list)
    dropped_patches: int = 0
    flags: list[str] = field(default_factory=list)
    local_estimates: list[np.ndarray] | None = None
    signs: np.ndarray | None = None
    pairwise: dict | None = None

    @property
    def covered(self) -> np.ndarray:
        return np.unique(np.concatenate(self.patches)) if self.patches else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------- partitioning

def _fiedler_split(adj: sp.csr_matrix, nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sign split of the Fiedler vector of the normalized Laplacian of ``adj[nodes][:, nodes]``."""
    A = adj[nodes][:, nodes].toarray()
    deg = A.sum(axis=1)
    dinv = 1.0 / np.sqrt(np.maximum(deg, 1.0))
    Lsym = np.eye(len(nodes)) - dinv[:, None] * A * dinv[None, :]
    w, V = np.linalg.eigh(Lsym)
    f = V[:, 1] * dinv
    left = f < 0
    if left.all() or not left.any():
        left = f < np.median(f)
        if left.all() or not left.any():
            left = np.zeros(len(nodes), dtype=bool)
            left[: len(nodes) // 2] = True
    return nodes[left], nodes[~left]


def partition_graph(graph: MeasurementGraph, n_max: int) -> list[np.ndarray]:
    """Overlapping node sets of size at most ``n_max``.

    Each queued core set is bisected by the Fiedler vector of its normalized
    Laplacian and each half is extended by its one-hop neighborhood in the
    full graph. An extension that fits is accepted; otherwise the half is
    bisected again while it is larger than ``n_max / 2``. A small half whose
    neighborhood is still too large keeps only the neighbors with the most
    edges into it.
    """
    if n_max < graph.d + 2:
        raise InputError(f"n_max must be at least d + 2 = {graph.d + 2}")
    if graph.n <= n_max:
        return [np.arange(graph.n)]
    adj = graph.adjacency()
    patches: list[np.ndarray] = []
    queue = deque([np.arange(graph.n)])
    while queue:
        core = queue.popleft()
        for half in _fiedler_split(adj, core):
            if len(half) == 0:
                continue
            counts = np.asarray(adj[half].sum(axis=0)).ravel()
            counts[half] = 0
            nbrs = np.flatnonzero(counts)
            if len(half) + len(nbrs) <= n_max:
                patches.append(np.union1d(half, nbrs))
            elif len(half) > n_max // 2:
                queue.append(half)
            else:
                room = n_max - len(half)
                order = np.lexsort((nbrs, -counts[nbrs]))
                patches.append(np.union1d(half, nbrs[order[:room]]))
    return sorted(patches, key=lambda p: (p[0], len(p)))


# ---------------------------------------------------------------- refinement

def _patch_graph(patches: list[np.ndarray]) -> list[tuple[int, int]]:
    edges = []
    for a in range(len(patches)):
        for b in range(a + 1, len(patches)):
            if len(np.intersect1d(patches[a], patches[b], assume_unique=True)) >= MIN_OVERLAP:
                edges.append((a, b))
    return edges


def refine_patches(graph: MeasurementGraph, raw: list[np.ndarray], seed: int | None = 0) -> PatchDecomposition:
    """Keep rigid parts of patches and the connected part of their overlap graph."""
    flags: list[str] = []
    kept: list[np.ndarray] = []
    for k, p in enumerate(raw):
        sub, idx = graph.subgraph(p)
        if sub.m == 0:
            continue
        if rigidity.test_parallel_rigidity(sub, graph.d, seed).rigid:
            kept.append(idx)
            continue
        comps = rigidity.extract_max_rigid_components(sub, graph.d, seed)
        if not comps:
            continue
        best = max(comps, key=lambda c: (len(c), [-v for v in c]))
        flags.append(f"patch {k} flexible: kept rigid component of size {len(best)}")
        kept.append(idx[np.asarray(best)])
    # drop duplicates and subsets
    kept.sort(key=lambda p: (-len(p), tuple(p)))
    distinct: list[np.ndarray] = []
    for p in kept:
        if not any(len(np.setdiff1d(p, q, assume_unique=True)) == 0 for q in distinct):
            distinct.append(p)
    distinct.sort(key=lambda p: (p[0], len(p)))
    if not distinct:
        raise SolverError("no rigid patch survived refinement")
    dropped_patches = 0
    if len(distinct) > 1:
        pe = _patch_graph(distinct)
        A = sp.coo_matrix((np.ones(len(pe)), tuple(np.array(pe).T) if pe else ([], [])),
                          shape=(len(distinct), len(distinct)))
        ncomp, lab = csgraph.connected_components(A, directed=False)
        if ncomp > 1:
            sizes = np.bincount(lab)
            keep_lab = int(np.argmax(sizes))
            dropped_patches = int(len(distinct) - sizes[keep_lab])
            flags.append(f"overlap graph disconnected: dropped {dropped_patches} patches")
            distinct = [p for p, l in zip(distinct, lab) if l == keep_lab]
    edges = _patch_graph(distinct)
    covered = np.unique(np.concatenate(distinct))
    dropped = np.setdiff1d(np.arange(graph.n), covered).tolist()
    return PatchDecomposition(distinct, edges, dropped, dropped_patches, flags)


# ---------------------------------------------------------------- registration and signs

def register_pair(est_i: np.ndarray, est_j: np.ndarray) -> tuple[float, np.ndarray, int]:
    """Least-squares ``c, t`` with ``est_i ~ c est_j + t`` on common points.

    Rows of ``est_i`` and ``est_j`` are the same points in the two local frames.
    """
    est_i = np.asarray(est_i, dtype=float)
    est_j = np.asarray(est_j, dtype=float)
    if est_i.shape != est_j.shape or est_i.shape[0] < MIN_OVERLAP:
        raise InputError("registration needs at least two common points in both patches")
    mi, mj = est_i.mean(axis=0), est_j.mean(axis=0)
    xi, xj = est_i - mi, est_j - mj
    den = float(np.sum(xj * xj))
    if den <= 1e-24 * max(float(np.sum(xi * xi)), 1.0):
        raise DegenerateRegistrationError("overlap points coincide in patch j")
    c = float(np.sum(xi * xj)) / den
    t = mi - c * mj
    return c, t, (1 if c >= 0 else -1)


def sync_signs(n_patches: int, patch_edges: list[tuple[int, int]], z: dict | list) -> np.ndarray:
    """Per-patch signs from pairwise sign estimates, by the leading eigenvector.

    The output is normalized so that the first patch has sign ``+1``.
    """
    if n_patches == 1:
        return np.ones(1, dtype=int)
    Z = np.zeros((n_patches, n_patches))
    zs = z if isinstance(z, dict) else dict(zip(patch_edges, z))
    for (a, b) in patch_edges:
        Z[a, b] = Z[b, a] = zs[(a, b)]
    ncomp, _ = csgraph.connected_components(sp.csr_matrix(np.abs(Z)), directed=False)
    if ncomp > 1:
        raise InputError("patch graph is disconnected")
    w, V = np.linalg.eigh(Z)
    v = V[:, -1]
    v = np.where(np.abs(v) <= SIGN_ZERO_TOL * np.abs(v).max(), 0.0, v)
    s = np.sign(v).astype(int)
    if np.any(s == 0):
        log.warning("%d zero entries in the sign eigenvector set to +1", int(np.sum(s == 0)))
        s[s == 0] = 1
    return s * s[0]


# ---------------------------------------------------------------- stitching

@dataclass
class StitchResult:
    locations: np.ndarray  # (len(nodes), d)
    nodes: np.ndarray
    scales: np.ndarray
    translations: np.ndarray
    objective: float
    sweeps: int
    converged: bool


def stitch_objective(patches, local, nodes_lut, t, c, u) -> float:
    return float(sum(np.linalg.norm(t[nodes_lut[p]] - c[i] * x - u[i], axis=1).sum()
                     for i, (p, x) in enumerate(zip(patches, local))))


def stitch(patches: list[np.ndarray], local: list[np.ndarray], delta: float = STITCH_DELTA,
           rtol: float = STITCH_RTOL, max_sweeps: int = STITCH_MAX_SWEEPS) -> StitchResult:
    """Minimize ``sum_i sum_{k in P_i} |t_k - (c_i x^i_k + u_i)|`` subject to ``c_i >= 1``.

    ``local[i]`` holds the sign-corrected local coordinates ``x^i`` of the
    nodes ``patches[i]``. Iteratively reweighted least squares: with weights
    fixed, each ``t_k`` is a weighted mean of its patch predictions and is
    eliminated, leaving a small bounded least-squares problem in the scales
    and translations (the translation of patch 0 is pinned to remove the
    global translation freedom).
    """
    P = len(patches)
    d = local[0].shape[1]
    nodes = np.unique(np.concatenate(patches))
    lut = -np.ones(nodes.max() + 1, dtype=np.int64)
    lut[nodes] = np.arange(len(nodes))
    rows_k = np.concatenate([lut[p] for p in patches])        # global node index per row
    rows_i = np.concatenate([np.full(len(p), i) for i, p in enumerate(patches)])
    X = np.concatenate(local)                                 # (R, d)
    R = len(rows_k)
    N = len(nodes)
    w = np.ones(R)
    prev = np.inf
    ncol = P + d * (P - 1)
    c = np.ones(P)
    u = np.zeros((P, d))
    converged = False
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        # t_k = sum_r w_r (c_i x_r + u_i) / sum_r w_r over rows r of node k
        wsum = np.bincount(rows_k, weights=w, minlength=N)
        S = sp.csr_matrix((w / wsum[rows_k], (rows_k, np.arange(R))), shape=(N, R))
        # residual_r = t_k - c_i x_r - u_i, linear in theta = (c, u_1..u_{P-1})
        G = sp.csr_matrix((np.ones(R), (np.arange(R), rows_k)), shape=(R, N)) @ S - sp.eye(R)
        G = G.toarray()
        A = np.zeros((R, d, ncol))
        for a in range(d):
            Cx = np.zeros((R, P))
            Cx[np.arange(R), rows_i] = X[:, a]
            A[:, a, :P] = G @ Cx
            Cu = np.zeros((R, P))
            Cu[np.arange(R), rows_i] = 1.0
            A[:, a, P + a::d] = (G @ Cu)[:, 1:]
        sw = np.sqrt(w)[:, None, None]
        Aw = (A * sw).reshape(R * d, ncol)
        lb = np.concatenate([np.ones(P), np.full(d * (P - 1), -np.inf)])
        res = lsq_linear(Aw, np.zeros(R * d), bounds=(lb, np.full(ncol, np.inf)), method="bvls",
                         tol=1e-14, lsmr_tol=None)
        theta = res.x
        c = theta[:P]
        u = np.vstack([np.zeros(d), theta[P:].reshape(P - 1, d)])
        pred = c[rows_i, None] * X + u[rows_i]
        t = np.zeros((N, d))
        np.add.at(t, rows_k, (w / wsum[rows_k])[:, None] * pred)
        r = np.linalg.norm(t[rows_k] - pred, axis=1)
        obj = float(r.sum())
        if not np.isfinite(obj):
            raise SolverError("stitching produced non-finite values")
        if abs(prev - obj) <= rtol * max(obj, 1e-300) or obj <= 1e-14 * max(np.abs(pred).max(), 1.0):
            converged = True
            break
        prev = obj
        w = 1.0 / np.maximum(r, delta)
    return StitchResult(t, nodes, c, u, obj, sweep, converged)


# ---------------------------------------------------------------- pipeline

def register_all(patches: list[np.ndarray], local: list[np.ndarray], patch_edges) -> dict:
    out = {}
    for (a, b) in patch_edges:
        common = np.intersect1d(patches[a], patches[b], assume_unique=True)
        ia = np.searchsorted(patches[a], common)
        ib = np.searchsorted(patches[b], common)
        out[(a, b)] = register_pair(local[a][ia], local[b][ib])
    return out


def combine_patches(patches: list[np.ndarray], local: list[np.ndarray],
                    patch_edges: list[tuple[int, int]] | None = None) -> tuple[StitchResult, np.ndarray, dict]:
    """Registration, sign synchronization and stitching of local solutions."""
    if patch_edges is None:
        patch_edges = _patch_graph(patches)
    pairwise = register_all(patches, local, patch_edges)
    signs = sync_signs(len(patches), patch_edges, {e: v[2] for e, v in pairwise.items()})
    corrected = [s * x for s, x in zip(signs, local)]
    return stitch(patches, corrected), signs, pairwise


@dataclass
class DistributedReport:
    locations: np.ndarray  # (n, d), NaN rows for dropped nodes
    decomposition: PatchDecomposition
    patch_gaps: list[float]
    patch_iters: list[int]
    timings: dict
    stitch: StitchResult | None

    def to_dict(self, timings: bool = False) -> dict:
        locs = [None if np.isnan(r).any() else [float(v) for v in r] for r in self.locations]
        out = {
            "locations": locs,
            "patches": [p.tolist() for p in self.decomposition.patches],
            "patch_edges": [list(e) for e in self.decomposition.patch_edges],
            "patch_spectral_gaps": self.patch_gaps,
            "patch_iters": self.patch_iters,
            "signs": None if self.decomposition.signs is None else self.decomposition.signs.tolist(),
            "dropped_nodes": self.decomposition.dropped_nodes,
            "flags": self.decomposition.flags,
        }
        if timings:
            out["timings"] = self.timings
        return out


def _solve_patch(graph: MeasurementGraph, nodes: np.ndarray, cfg: SdrConfig):
    sub, _ = graph.subgraph(nodes)
    sol = adm_solve(build_cost_operators(sub), cfg)
    return sol.rounded.t, sol.spectral_gap, sol.iters


def solve_distributed(graph: MeasurementGraph, cfg: SdrConfig | None = None, n_max: int = 70,
                      workers: int = 1, seed: int | None = 0) -> DistributedReport:
    """Partition, solve patches in parallel, register, synchronize signs and stitch."""
    cfg = cfg or SdrConfig()
    if not graph.is_connected():
        raise InputError("distributed solve needs a connected graph")
    timings = {}
    t0 = time.perf_counter()
    if graph.n <= n_max:
        sol = adm_solve(build_cost_operators(graph), cfg)
        timings["solve"] = time.perf_counter() - t0
        dec = PatchDecomposition([np.arange(graph.n)], [], signs=np.ones(1, dtype=int))
        return DistributedReport(sol.rounded.t.copy(), dec, [sol.spectral_gap], [sol.iters], timings, None)
    raw = partition_graph(graph, n_max)
    timings["partition"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    dec = refine_patches(graph, raw, seed)
    timings["refine"] = time.perf_counter() - t1
    t1 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
        results = list(pool.map(lambda p: _solve_patch(graph, p, cfg), dec.patches))
    timings["patch_solves"] = time.perf_counter() - t1
    local = [r[0] for r in results]
    t1 = time.perf_counter()
    st, signs, pairwise = combine_patches(dec.patches, local, dec.patch_edges)
    timings["stitch"] = time.perf_counter() - t1
    dec.local_estimates, dec.signs, dec.pairwise = local, signs, pairwise
    locs = np.full((graph.n, graph.d), np.nan)
    locs[st.nodes] = st.locations
    timings["total"] = time.perf_counter() - t0
    return DistributedReport(locs, dec, [r[1] for r in results], [r[2] for r in results], timings, st)
