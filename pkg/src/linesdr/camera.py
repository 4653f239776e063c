"""Camera front-end: epipolar line samples, robust rotations and robust line fits.

Conventions: camera ``i`` has rotation ``R_i`` and center ``t_i``; a world point
``P`` has camera coordinates ``R_i^T (P - t_i)`` and image point
``q = f_i (x, y) / z``. Relative rotations are ``R_ij = R_i^T R_j``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .core import InputError, LocationSet, MeasurementGraph, SolverError, make_rng, read_json

log = logging.getLogger(__name__)

ROT_TOL = 1e-8
ZERO_SAMPLE_TOL = 1e-12
REAPER_DELTA = 1e-8
REAPER_RTOL = 1e-9
REAPER_MAX_ITERS = 1000


@dataclass(frozen=True)
class RelativeRotationGraph:
    n: int
    focal: np.ndarray          # (n,)
    edges: np.ndarray          # (m, 2)
    rotations: np.ndarray      # (m, 3, 3), R_ij
    pairs: list[np.ndarray]    # per edge (k, 4): q_i (x, y), q_j (x, y)

    def __post_init__(self):
        if np.any(np.asarray(self.focal) <= 0):
            raise InputError("focal lengths must be positive")
        R = np.asarray(self.rotations, dtype=float).reshape(-1, 3, 3)
        for k, r in enumerate(R):
            if np.abs(r.T @ r - np.eye(3)).max() > ROT_TOL or abs(np.linalg.det(r) - 1) > ROT_TOL:
                i, j = self.edges[k]
                raise InputError(f"edge ({i}, {j}): R is not a rotation")

    @property
    def m(self) -> int:
        return len(self.edges)

    def subset(self, keep: np.ndarray) -> "RelativeRotationGraph":
        keep = np.asarray(keep, dtype=bool)
        return RelativeRotationGraph(self.n, self.focal, self.edges[keep], self.rotations[keep],
                                     [p for p, k in zip(self.pairs, keep) if k])


def rotation_graph_from_dict(obj: dict) -> RelativeRotationGraph:
    allowed = {"n", "focal", "edges"}
    if not isinstance(obj, dict) or set(obj) - allowed:
        raise InputError(f"camera input must be an object with fields {sorted(allowed)}")
    try:
        n = int(obj["n"])
        focal = np.asarray(obj["focal"], dtype=float)
        raw = obj["edges"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"camera input needs n, focal and edges ({exc})") from exc
    if focal.shape != (n,):
        raise InputError(f"focal must list {n} values")
    edges, rots, pairs = [], [], []
    for k, e in enumerate(raw):
        try:
            i, j = int(e["i"]), int(e["j"])
            R = np.asarray(e["R"], dtype=float).reshape(3, 3)
            q = np.asarray(e["pairs"], dtype=float).reshape(-1, 4)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"edge {k}: expected i, j, R (9 values) and pairs") from exc
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise InputError(f"edge {k}: bad endpoints ({i}, {j})")
        if i > j:  # store with i < j: R_ji = R_ij^T and the pair columns swap
            i, j, R, q = j, i, R.T, q[:, [2, 3, 0, 1]]
        edges.append((i, j))
        rots.append(R)
        pairs.append(q)
    return RelativeRotationGraph(n, focal, np.asarray(edges, dtype=np.int64).reshape(-1, 2),
                                 np.asarray(rots).reshape(-1, 3, 3), pairs)


def rotation_graph_to_dict(g: RelativeRotationGraph) -> dict:
    return {
        "n": g.n,
        "focal": [float(f) for f in g.focal],
        "edges": [{"i": int(i), "j": int(j), "R": [float(v) for v in R.ravel()],
                   "pairs": p.tolist()} for (i, j), R, p in zip(g.edges, g.rotations, g.pairs)],
    }


def load_rotation_graph(path) -> RelativeRotationGraph:
    return rotation_graph_from_dict(read_json(path))


# ---------------------------------------------------------------- rotation utilities

def project_to_rotation(A: np.ndarray) -> np.ndarray:
    """Nearest rotation in Frobenius norm (orthogonal polar factor with det fix)."""
    U, _, Vt = np.linalg.svd(A)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ D @ Vt


def rotation_angle(R: np.ndarray) -> float:
    # 2 asin(|R - I|_F / sqrt 8) is accurate near zero, unlike acos of the trace
    s = np.linalg.norm(R - np.eye(3)) / math.sqrt(8.0)
    return float(2.0 * math.asin(min(1.0, s)))


def align_rotations(est: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-camera geodesic errors after the best global rotation ``est_i ~ G truth_i``."""
    G = project_to_rotation(np.einsum("iab,icb->ac", est, truth))
    return np.array([rotation_angle(G @ t @ e.T) for e, t in zip(est, truth)])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


# ---------------------------------------------------------------- epipolar samples

def epipolar_samples(rot_i: np.ndarray, rot_j: np.ndarray, q_pairs: np.ndarray,
                     f_i: float, f_j: float) -> tuple[np.ndarray, int]:
    """Unit normals of the planes through both back-projected rays.

    Returns ``(samples, n_dropped)``; a pair whose rays are parallel gives a
    zero cross product and is dropped.
    """
    q = np.asarray(q_pairs, dtype=float).reshape(-1, 4)
    ri = np.column_stack([q[:, 0] / f_i, q[:, 1] / f_i, np.ones(len(q))]) @ np.asarray(rot_i).T
    rj = np.column_stack([q[:, 2] / f_j, q[:, 3] / f_j, np.ones(len(q))]) @ np.asarray(rot_j).T
    nu = np.cross(ri, rj)
    nrm = np.linalg.norm(nu, axis=1)
    scale = np.linalg.norm(ri, axis=1) * np.linalg.norm(rj, axis=1)
    ok = nrm > ZERO_SAMPLE_TOL * scale
    return nu[ok] / nrm[ok, None], int(np.sum(~ok))


# ---------------------------------------------------------------- rotations

def evm_rotations(n: int, edges: np.ndarray, Rij: np.ndarray) -> np.ndarray:
    """Rotations from relative rotations by the top-3 eigenvectors of the block matrix.

    The result is gauge-fixed so that the first camera has the identity.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    A = sp.coo_matrix((np.ones(len(edges)), tuple(edges.T)), shape=(n, n))
    if csgraph.connected_components(A, directed=False)[0] > 1:
        raise InputError("rotation graph is disconnected")
    M = np.eye(3 * n)
    for (i, j), R in zip(edges, Rij):
        M[3 * i:3 * i + 3, 3 * j:3 * j + 3] = R
        M[3 * j:3 * j + 3, 3 * i:3 * i + 3] = R.T
    w, V = np.linalg.eigh(M)
    V = V[:, -3:] * math.sqrt(n)
    blocks = V.reshape(n, 3, 3)
    if np.sum(np.linalg.det(blocks) < 0) > n / 2:
        blocks[:, :, 2] *= -1
    est = np.array([project_to_rotation(b).T for b in blocks])
    return np.einsum("ab,iac->ibc", est[0], est)  # est_1^T est_i


def consistency_errors(est: np.ndarray, edges: np.ndarray, Rij: np.ndarray) -> np.ndarray:
    i, j = edges.T
    return np.linalg.norm(np.einsum("eba,ebc->eac", est[i], est[j]) - Rij, axis=(1, 2))


@dataclass
class RobustRotationResult:
    rotations: np.ndarray        # (n, 3, 3); NaN for cameras outside the kept component
    nodes: np.ndarray            # kept cameras
    edge_mask: np.ndarray        # kept edges of the input graph
    rounds: int
    mean_errors: list[float] = field(default_factory=list)


def parse_rule(rule: str) -> tuple[str, float]:
    if rule == "mean2sigma":
        return "mean2sigma", 2.0
    if rule.startswith("topfrac:"):
        try:
            x = float(rule.split(":", 1)[1])
        except ValueError as exc:
            raise InputError(f"bad outlier rule {rule!r}") from exc
        if not 0 < x < 1:
            raise InputError("topfrac fraction must be in (0, 1)")
        return "topfrac", x
    raise InputError(f"unknown outlier rule {rule!r} (use mean2sigma or topfrac:x)")


def robust_rotations(n: int, edges: np.ndarray, Rij: np.ndarray, rounds: int = 10,
                     rule: str = "mean2sigma", abs_tol: float = 1e-6,
                     rel_change: float = 1e-3) -> RobustRotationResult:
    """Alternate eigenvector rotation estimates and pruning of inconsistent edges.

    ``mean2sigma`` removes edges whose error exceeds the mean plus two standard
    deviations (at least the worst edge while any error exceeds ``abs_tol``);
    ``topfrac:x`` removes the ``ceil(x m)`` worst edges. After pruning only the
    largest connected component is kept. Iteration stops once every error is
    below ``abs_tol``, the mean error changes by less than ``rel_change``
    (relative), or after ``rounds`` rounds.
    """
    kind, param = parse_rule(rule)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    alive = np.ones(len(edges), dtype=bool)
    nodes = np.arange(n)
    means: list[float] = []
    est_full = None
    k = 0
    for k in range(1, rounds + 1):
        lut = -np.ones(n, dtype=np.int64)
        lut[nodes] = np.arange(len(nodes))
        e_idx = np.flatnonzero(alive)
        sub_edges = lut[edges[e_idx]]
        est = evm_rotations(len(nodes), sub_edges, Rij[e_idx])
        err = consistency_errors(est, sub_edges, Rij[e_idx])
        est_full = np.full((n, 3, 3), np.nan)
        est_full[nodes] = est
        mean = float(err.mean())
        stop = bool(err.max() <= abs_tol) or (len(means) > 0 and abs(means[-1] - mean) <= rel_change * max(means[-1], 1e-300))
        means.append(mean)
        if stop or k == rounds:
            break
        if kind == "topfrac":
            cut = int(math.ceil(param * len(err)))
            drop = np.argsort(-err, kind="stable")[:cut]
        else:
            thr = max(mean + param * float(err.std()), abs_tol)
            drop = np.flatnonzero(err > thr)
            if len(drop) == 0:
                drop = np.array([int(np.argmax(err))])
        alive[e_idx[drop]] = False
        # largest connected component of the surviving edges
        e_alive = edges[alive]
        A = sp.coo_matrix((np.ones(len(e_alive)), tuple(e_alive.T)), shape=(n, n))
        _, lab = csgraph.connected_components(A, directed=False)
        present = np.zeros(n, dtype=bool)
        present[e_alive.ravel()] = True
        if not present.any():
            raise SolverError("rotation graph lost all edges during pruning")
        sizes = np.bincount(lab[present], minlength=lab.max() + 1)
        big = int(np.argmax(sizes))
        nodes = np.flatnonzero((lab == big) & present)
        if len(nodes) < 2:
            raise SolverError("rotation graph shrank below two cameras")
        alive &= np.isin(edges[:, 0], nodes) & np.isin(edges[:, 1], nodes)
    return RobustRotationResult(est_full, nodes, alive, k, means)


# ---------------------------------------------------------------- robust plane fits

def _eigen_step(C: np.ndarray) -> np.ndarray:
    """Minimize ``Tr((I - Q)^2 C)`` over ``0 <= Q <= I``, ``Tr Q = 2``.

    ``Q`` shares the eigenvectors of ``C``; with eigenvalues ``c_k`` the
    optimal eigenvalues are ``clip(1 - theta / c_k, 0, 1)`` with ``theta``
    fixed by the trace. With all three ``c_k > theta`` this gives
    ``theta = 1 / sum(1 / c_k)``; otherwise the two leading eigenvalues are 1.
    """
    c, U = np.linalg.eigh(0.5 * (C + C.T))
    ell = np.array([0.0, 1.0, 1.0])
    if c[0] > 0:
        theta = 1.0 / np.sum(1.0 / c)
        if theta < c[0]:
            ell = 1.0 - theta / c
    return (U * ell) @ U.T


def _reaper_objective(Q: np.ndarray, X: np.ndarray) -> float:
    return float(np.linalg.norm(X - X @ Q.T, axis=1).sum())


def pca_projector(X: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(X.T @ X)
    return U[:, -2:] @ U[:, -2:].T


@dataclass(frozen=True)
class ReaperFit:
    Q: np.ndarray
    Gamma: np.ndarray
    gamma: np.ndarray
    objective: float
    iters: int
    fallback: bool


def sreaper_line(samples: np.ndarray, delta: float = REAPER_DELTA, rtol: float = REAPER_RTOL,
                 max_iters: int = REAPER_MAX_ITERS) -> ReaperFit:
    """Robust 2D subspace of unit samples and the line orthogonal to it.

    Minimizes ``sum_k |nu_k - Q nu_k|`` over ``0 <= Q <= I``, ``Tr Q = 2`` by
    iteratively reweighted least squares started from the PCA projector.
    """
    X = np.asarray(samples, dtype=float).reshape(-1, 3)
    X = X[np.linalg.norm(X, axis=1) > ZERO_SAMPLE_TOL]
    if len(X) < 2:
        raise InputError("at least two non-zero samples are needed")
    s = np.linalg.svd(X, compute_uv=False)
    if s[1] <= 1e-10 * s[0]:
        log.warning("samples are collinear: the plane is ill-posed, using PCA")
        Q = pca_projector(X)
        return _finish(Q, X, 0, True)
    Q = pca_projector(X)
    obj = _reaper_objective(Q, X)
    it = 0
    for it in range(1, max_iters + 1):
        r = np.linalg.norm(X - X @ Q.T, axis=1)
        w = 1.0 / np.maximum(r, delta)
        Qn = _eigen_step((X * w[:, None]).T @ X)
        new = _reaper_objective(Qn, X)
        if new > obj:  # keep the monotone sequence; stop on numerical ascent
            break
        Q, done = Qn, abs(obj - new) <= rtol * max(obj, 1e-300)
        obj = new
        if done or obj == 0.0:
            break
    return _finish(Q, X, it, False)


def _finish(Q, X, it, fallback) -> ReaperFit:
    Q = 0.5 * (Q + Q.T)
    w, U = np.linalg.eigh(Q)
    q1, q2 = U[:, -1], U[:, -2]
    Gamma = np.eye(3) - np.outer(q1, q1) - np.outer(q2, q2)
    g = U[:, 0]
    nz = np.flatnonzero(np.abs(g) > 1e-12)
    if len(nz) and g[nz[0]] < 0:
        g = -g
    return ReaperFit(Q, Gamma, g, _reaper_objective(Q, X), it, fallback)


def pca_line(samples: np.ndarray) -> np.ndarray:
    X = np.asarray(samples, dtype=float).reshape(-1, 3)
    w, U = np.linalg.eigh(X.T @ X)
    return U[:, 0]


# ---------------------------------------------------------------- line graph

@dataclass
class LineGraphResult:
    graph: MeasurementGraph
    cameras: np.ndarray               # original index of each node of ``graph``
    dropped_edges: list[tuple[int, int]]
    zero_samples: int


def build_line_graph(rg: RelativeRotationGraph, rotations: np.ndarray,
                     edge_mask: np.ndarray | None = None, workers: int = 1) -> LineGraphResult:
    """Estimate a line per surviving edge and assemble a measurement graph.

    Nodes of the output are the cameras with finite rotations that keep at
    least one edge, relabelled in increasing order.
    """
    mask = np.ones(rg.m, dtype=bool) if edge_mask is None else np.asarray(edge_mask, dtype=bool)
    ok_cam = np.isfinite(rotations).all(axis=(1, 2))
    idx = [k for k in np.flatnonzero(mask) if ok_cam[rg.edges[k, 0]] and ok_cam[rg.edges[k, 1]]]

    def fit(k):
        i, j = rg.edges[k]
        nu, nz = epipolar_samples(rotations[i], rotations[j], rg.pairs[k], rg.focal[i], rg.focal[j])
        if len(nu) < 2 or np.linalg.matrix_rank(nu, tol=1e-10) < 2:
            return k, None, nz
        return k, sreaper_line(nu).gamma, nz

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fits = list(pool.map(fit, idx))
    else:
        fits = [fit(k) for k in idx]
    dropped = [tuple(map(int, rg.edges[k])) for k, g, _ in fits if g is None]
    good = [(k, g) for k, g, _ in fits if g is not None]
    zero = int(sum(nz for _, _, nz in fits))
    if not good:
        raise SolverError("no edge produced a line estimate")
    e = rg.edges[[k for k, _ in good]]
    cams = np.unique(e)
    lut = -np.ones(rg.n, dtype=np.int64)
    lut[cams] = np.arange(len(cams))
    graph = MeasurementGraph.from_edges(3, len(cams), lut[e], np.array([g for _, g in good]))
    if dropped:
        log.info("%d edges dropped for lack of usable samples", len(dropped))
    return LineGraphResult(graph, cams, dropped, zero)


# ---------------------------------------------------------------- synthetic scenes

@dataclass
class SyntheticScene:
    rotations: np.ndarray   # (n, 3, 3)
    centers: np.ndarray     # (n, 3)
    points: np.ndarray      # (N, 3)
    rot_graph: RelativeRotationGraph


def look_at(center: np.ndarray, target: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    z = target - center
    z /= np.linalg.norm(z)
    a = rng.standard_normal(3)
    x = a - (a @ z) * z
    x /= np.linalg.norm(x)
    return np.column_stack([x, np.cross(z, x), z])


def synthetic_scene(n_cams: int = 30, n_points: int = 500, seed: int = 0, focal: float = 500.0,
                    radius: float = 4.0, edge_prob: float = 1.0, outlier_frac: float = 0.0,
                    pixel_noise: float = 0.0, image_half: float = 400.0,
                    max_pairs: int | None = None) -> SyntheticScene:
    """Cameras on a sphere looking at a cloud of points; correspondences per camera pair.

    ``outlier_frac`` of each edge's correspondences are replaced by uniform
    random image points in ``[-image_half, image_half]^2``.
    """
    rng = make_rng(seed)
    P = rng.uniform(-1.0, 1.0, size=(n_points, 3))
    dirs = rng.standard_normal((n_cams, 3))
    C = radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    Rs = np.array([look_at(c, rng.normal(0, 0.1, 3), rng) for c in C])
    proj = []
    for R, c in zip(Rs, C):
        X = (P - c) @ R
        proj.append(focal * X[:, :2] / X[:, 2:3])
    edges, rots, pairs = [], [], []
    for i in range(n_cams):
        for j in range(i + 1, n_cams):
            if rng.random() > edge_prob:
                continue
            sel = np.arange(n_points) if max_pairs is None else rng.choice(n_points, max_pairs, replace=False)
            q = np.hstack([proj[i][sel], proj[j][sel]])
            if pixel_noise > 0:
                q = q + pixel_noise * rng.standard_normal(q.shape)
            n_out = int(round(outlier_frac * len(q)))
            if n_out:
                bad = rng.choice(len(q), n_out, replace=False)
                q[bad] = rng.uniform(-image_half, image_half, size=(n_out, 4))
            edges.append((i, j))
            rots.append(Rs[i].T @ Rs[j])
            pairs.append(q)
    rg = RelativeRotationGraph(n_cams, np.full(n_cams, focal), np.asarray(edges, dtype=np.int64),
                               np.asarray(rots), pairs)
    return SyntheticScene(Rs, C, P, rg)
