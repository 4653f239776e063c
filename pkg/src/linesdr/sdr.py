"""Semidefinite relaxation of location estimation and its ADM solver.

The relaxation is

    minimize    Tr(L T)
    subject to  Tr(C^{ij} T) >= 1   for every edge (i, j)
                Tr(H T) = 0,  T PSD

where ``C^{ij}`` has identity blocks at ``(i, i)``, ``(j, j)`` and negated
identity blocks at ``(i, j)``, ``(j, i)``, and ``H = J_n (x) I_d``. The solver
alternates closed-form updates of the dual multipliers ``z``, the dual slack
``R`` and the primal pair ``(T, nu)``; the only expensive step is the negative
spectral part of a ``dn x dn`` symmetric matrix.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .core import (CostOperators, InputError, LocationSet, MeasurementGraph, SolverError,
                   build_cost_operators, make_rng)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- operators

def block_traces(T: np.ndarray, n: int, d: int) -> np.ndarray:
    """``n x n`` matrix of ``Tr(T_ab)`` over the ``d x d`` blocks of ``T``."""
    return np.einsum("ikjk->ij", T.reshape(n, d, n, d))


def btilde_apply(ops: CostOperators, T: np.ndarray) -> np.ndarray:
    """Per-edge ``Tr(C^{ij} T) = Tr(T_ii) + Tr(T_jj) - Tr(T_ij) - Tr(T_ji)``."""
    bt = block_traces(T, ops.n, ops.d)
    i, j = ops.edges[:, 0], ops.edges[:, 1]
    return bt[i, i] + bt[j, j] - bt[i, j] - bt[j, i]


def weighted_laplacian(n: int, edges: np.ndarray, w: np.ndarray) -> np.ndarray:
    i, j = edges[:, 0], edges[:, 1]
    W = np.zeros((n, n))
    np.add.at(W, (i, j), -w)
    np.add.at(W, (j, i), -w)
    W[np.diag_indices(n)] = -W.sum(axis=1)
    return W


def btilde_adjoint(ops: CostOperators, z: np.ndarray) -> np.ndarray:
    """``sum_e z_e C^e``, i.e. the ``z``-weighted graph Laplacian tensored with ``I_d``."""
    return np.kron(weighted_laplacian(ops.n, ops.edges, np.asarray(z, dtype=float)), np.eye(ops.d))


@dataclass(frozen=True)
class InverseOperator:
    """Applies ``(B B^T + I)^{-1}`` with ``B B^T = d M^T M + 2d I``.

    ``M`` is the unsigned vertex-edge incidence matrix. Eigenpairs of ``M^T M``
    come from the ``n x n`` signless Laplacian ``M M^T``: for ``M M^T p = s p``
    with ``s > 0`` the unit vector ``M^T p / sqrt(s)`` is an eigenvector of
    ``B B^T`` with eigenvalue ``d s + 2d``. Every direction orthogonal to these
    has eigenvalue ``2d``.
    """

    V: np.ndarray  # (m, r) orthonormal
    D: np.ndarray  # (r,) eigenvalues of B B^T on span(V)
    d: int

    @classmethod
    def from_graph(cls, graph: MeasurementGraph | CostOperators, rtol: float = 1e-10) -> "InverseOperator":
        g = graph.graph if isinstance(graph, CostOperators) else graph
        M = g.incidence().toarray()
        s, P = np.linalg.eigh(M @ M.T)
        if not np.all(np.isfinite(s)):
            raise SolverError("eigendecomposition of the signless Laplacian failed")
        keep = s > rtol * max(s.max(initial=0.0), 1.0)
        V = (M.T @ P[:, keep]) / np.sqrt(s[keep])
        return cls(V=V, D=g.d * s[keep] + 2 * g.d, d=g.d)

    def apply(self, z: np.ndarray) -> np.ndarray:
        c = self.V.T @ z
        return self.V @ (c / (self.D + 1.0)) + (z - self.V @ c) / (2 * self.d + 1.0)

    __call__ = apply


def solve_inverse_operator(z: np.ndarray, inv: InverseOperator) -> np.ndarray:
    return inv.apply(z)


def bbt_matrix(graph: MeasurementGraph) -> np.ndarray:
    """Dense ``d M^T M + 2d I`` (for checks on small graphs)."""
    M = graph.incidence().toarray()
    return graph.d * M.T @ M + 2 * graph.d * np.eye(graph.m)


# ---------------------------------------------------------------- config and state

@dataclass(frozen=True)
class SdrConfig:
    """Parameters of the ADM solver.

    The penalty ``mu`` is rebalanced every ``adapt_every`` iterations when
    ``mu_adapt`` is on: it is multiplied (divided) by ``mu_factor`` when the
    dual (primal) infeasibility exceeds the other by ``mu_ratio``; when both
    are small compared with the duality gap, it moves toward the side on
    which the primal and dual objectives cross.
    """

    mu: float = 1.0
    max_iters: int = 20000
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    tol_gap: float = 1e-6
    mu_adapt: bool = True
    mu_factor: float = 1.5
    mu_ratio: float = 10.0
    gap_ratio: float = 1.0
    mu_min: float = 1e-4
    mu_max: float = 1e4
    adapt_every: int = 20
    rounding_rank_tol: float = 1e-6
    dense_eig_max: int = 900
    seed: int = 0
    history_every: int = 10

    def __post_init__(self):
        if not self.mu > 0:
            raise InputError("mu must be positive")
        for name in ("tol_primal", "tol_dual", "tol_gap", "rounding_rank_tol"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if self.max_iters < 1:
            raise InputError("max_iters must be at least 1")
        if not self.mu_factor > 1:
            raise InputError("mu_factor must exceed 1")

    def with_tol(self, tol: float) -> "SdrConfig":
        return replace(self, tol_primal=tol, tol_dual=tol, tol_gap=tol)


@dataclass
class AdmState:
    T: np.ndarray
    nu: np.ndarray
    R: np.ndarray
    eta: np.ndarray
    z: np.ndarray
    mu: float
    it: int = 0
    history: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class GramSolution:
    T_star: np.ndarray
    objective: float
    dual_objective: float
    spectral_gap: float
    rounded: LocationSet
    iters: int
    converged: bool
    residuals: dict
    rank_one: bool
    mu: float
    history: list[dict] = field(default_factory=list, repr=False)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "locations": self.rounded.t.tolist(),
            "objective": self.objective,
            "dual_objective": self.dual_objective,
            "spectral_gap": self.spectral_gap,
            "rank_one": self.rank_one,
            "iters": self.iters,
            "converged": self.converged,
            "residuals": dict(self.residuals),
            "mu": self.mu,
        }


# ---------------------------------------------------------------- spectral step

def negative_part(F: np.ndarray, dense_max: int = 900, k_hint: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of ``F`` with negative eigenvalues."""
    N = F.shape[0]
    if N <= dense_max:
        w, V = sla.eigh(F, subset_by_value=(-np.inf, 0.0), driver="evr", check_finite=False)
        return w, V
    k = min(max(k_hint, 4), N - 2)
    while True:
        w, V = spla.eigsh(F, k=k, which="SA", tol=1e-12)
        if w.max() >= 0 or k >= N - 2:
            neg = w < 0
            return w[neg], V[:, neg]
        k = min(2 * k, N - 2)


def initial_gram(ops: CostOperators, rng: np.random.Generator) -> np.ndarray:
    """Centered random rank-1 Gram matrix scaled to mean ``Tr(C^{ij} T) = 1``."""
    t = rng.standard_normal((ops.n, ops.d))
    t -= t.mean(axis=0)
    T = np.outer(t.ravel(), t.ravel())
    return T / btilde_apply(ops, T).mean()


def _residuals(ops, L, normL, T, T_prev, nu, eta, z, mu):
    m = ops.m
    pinf = np.linalg.norm(btilde_apply(ops, T) - nu - 1.0) / (1.0 + math.sqrt(m))
    # B*(z) + R - L equals (T - T_prev)/mu after the primal update
    dres = np.linalg.norm(T - T_prev) / mu
    dinf = math.sqrt(dres ** 2 + float(np.sum((eta - z) ** 2))) / (1.0 + normL)
    pobj = float(np.sum(L * T))
    dobj = float(z.sum())
    gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
    return pinf, dinf, gap, pobj, dobj


def adm_solve(ops: CostOperators, cfg: SdrConfig | None = None, T0: np.ndarray | None = None,
              callback: Callable[[AdmState, dict], None] | None = None) -> GramSolution:
    """Solve the relaxation by alternating-direction augmented Lagrangian updates.

    Each iteration performs, in order,

        z   = -(B B^T + I)^{-1} ((B(T) - nu - 1)/mu + B(R - L) - eta)
        F   = L - T/mu - B^*(z)
        R   = positive part of F,   T = -mu * negative part of F
        eta = max(z - nu/mu, 0),    nu = -mu * min(z - nu/mu, 0)

    Args:
        ops: cost operators of the measurement graph.
        cfg: solver parameters.
        T0: optional starting Gram matrix (must satisfy ``Tr(H T0) = 0``).
        callback: called as ``callback(state, record)`` after each iteration.

    Returns:
        A ``GramSolution`` with the final iterate, its rounding and residuals.
    """
    cfg = cfg or SdrConfig()
    t_start = time.perf_counter()
    n, d, m = ops.n, ops.d, ops.m
    if m == 0:
        raise InputError("graph has no edges")
    L = ops.dense_L()
    normL = float(np.linalg.norm(L))
    inv = InverseOperator.from_graph(ops.graph)
    BL = btilde_apply(ops, L)
    rng = make_rng(cfg.seed)
    T = initial_gram(ops, rng) if T0 is None else np.array(T0, dtype=float)
    state = AdmState(T=T, nu=np.zeros(m), R=np.zeros_like(T), eta=np.zeros(m), z=np.zeros(m), mu=cfg.mu)
    eye_d = np.eye(d)
    k_hint = 8
    pinf = dinf = gap = np.inf
    pobj = dobj = np.nan
    converged = False
    mu = cfg.mu
    nu, eta, R = state.nu, state.eta, state.R
    for it in range(1, cfg.max_iters + 1):
        rhs = (btilde_apply(ops, T) - nu - 1.0) / mu + btilde_apply(ops, R) - BL - eta
        z = -inv.apply(rhs)
        F = L - T / mu - np.kron(weighted_laplacian(n, ops.edges, z), eye_d)
        w, V = negative_part(F, cfg.dense_eig_max, k_hint)
        k_hint = len(w) + 4
        neg = (V * w) @ V.T
        T_prev = T
        T = -mu * neg
        R = F - neg
        wz = z - nu / mu
        eta = np.maximum(wz, 0.0)
        nu = -mu * np.minimum(wz, 0.0)
        if not (np.isfinite(z).all() and np.isfinite(w).all()):
            raise SolverError(f"non-finite iterate at iteration {it}")
        pinf, dinf, gap, pobj, dobj = _residuals(ops, L, normL, T, T_prev, nu, eta, z, mu)
        rec = None
        if it % cfg.history_every == 0 or it == 1:
            rec = {"iter": it, "primal": pinf, "dual": dinf, "gap": gap, "objective": pobj,
                   "dual_objective": dobj, "mu": mu, "trace_H": ops.trace_H(T)}
            state.history.append(rec)
        if callback is not None:
            state.T, state.nu, state.R, state.eta, state.z, state.mu, state.it = T, nu, R, eta, z, mu, it
            callback(state, rec or {"iter": it, "primal": pinf, "dual": dinf, "gap": gap,
                                    "objective": pobj, "dual_objective": dobj, "mu": mu})
        if pinf < cfg.tol_primal and dinf < cfg.tol_dual and gap < cfg.tol_gap:
            converged = True
            break
        if cfg.mu_adapt and it % cfg.adapt_every == 0:
            mu = _adapt_mu(mu, pinf, dinf, gap, pobj, dobj, cfg)
    state.T, state.nu, state.R, state.eta, state.z, state.mu, state.it = T, nu, R, eta, z, mu, it
    if not converged:
        log.info("ADM stopped after %d iterations (primal %.2e, dual %.2e, gap %.2e)", it, pinf, dinf, gap)
    rounded, sgap = round_with_gap(T, n, d)
    return GramSolution(
        T_star=T, objective=pobj, dual_objective=dobj, spectral_gap=sgap, rounded=rounded,
        iters=it, converged=converged,
        residuals={"primal": pinf, "dual": dinf, "gap": gap},
        rank_one=sgap >= 1.0 - cfg.rounding_rank_tol, mu=mu, history=state.history,
        seconds=time.perf_counter() - t_start,
    )


def _adapt_mu(mu, pinf, dinf, gap, pobj, dobj, cfg: SdrConfig) -> float:
    f, r = cfg.mu_factor, cfg.mu_ratio
    if dobj > pobj and gap > cfg.gap_ratio * max(pinf, dinf):
        # the dual objective overshoots the primal one: the primal iterate lags
        mu *= f
    elif dinf > r * pinf:
        mu *= f
    elif pinf > r * dinf:
        mu /= f
    return float(min(max(mu, cfg.mu_min), cfg.mu_max))


# ---------------------------------------------------------------- rounding and baselines

def _canonical_sign(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12 * np.abs(v).max())
    return -v if len(nz) and v[nz[0]] < 0 else v


def round_with_gap(T: np.ndarray, n: int, d: int) -> tuple[LocationSet, float]:
    T = 0.5 * (T + T.T)
    w, V = np.linalg.eigh(T)
    top = w[-1]
    if len(w) > 1 and abs(w[-1] - w[-2]) <= 1e-10 * max(abs(top), 1e-300):
        log.warning("leading eigenvalue of the Gram matrix is not simple; rounding is ambiguous")
    v = _canonical_sign(V[:, -1])
    gap = 0.0 if top <= 0 else float(np.clip((w[-1] - (w[-2] if len(w) > 1 else 0.0)) / top, 0.0, 1.0))
    return LocationSet(v.reshape(n, d)), gap


def round_solution(T_star: np.ndarray, d: int) -> LocationSet:
    """Leading unit eigenvector of ``T_star`` split into ``d``-blocks."""
    return round_with_gap(T_star, T_star.shape[0] // d, d)[0]


def spectral_gap(T: np.ndarray) -> float:
    w = np.linalg.eigvalsh(0.5 * (T + T.T))
    if w[-1] <= 0:
        return 0.0
    return float(np.clip((w[-1] - w[-2]) / w[-1], 0.0, 1.0)) if len(w) > 1 else 1.0


def least_squares_solve(ops: CostOperators) -> LocationSet:
    """Minimize ``t^T L t`` over centered ``t`` with ``sum |t_i|^2 = 1``."""
    n, d = ops.n, ops.d
    if not ops.graph.is_connected():
        raise InputError("least squares baseline needs a connected graph")
    # orthonormal basis of the centered subspace
    Zn = sla.null_space(np.ones((1, n)))
    Z = np.kron(Zn, np.eye(d))
    L = ops.dense_L()
    w, V = np.linalg.eigh(Z.T @ L @ Z)
    if not np.all(np.isfinite(w)):
        raise SolverError("eigensolver failure in least squares baseline")
    t = _canonical_sign(Z @ V[:, 0])
    return LocationSet(t.reshape(n, d))


def solve(ops: CostOperators | MeasurementGraph, cfg: SdrConfig | None = None) -> GramSolution:
    """Solve from a graph or its cost operators; warn when tolerance is not reached."""
    if isinstance(ops, MeasurementGraph):
        ops = build_cost_operators(ops)
    sol = adm_solve(ops, cfg)
    if not sol.converged:
        log.warning("ADM did not reach tolerance in %d iterations", sol.iters)
    return sol


# ---------------------------------------------------------------- stability analysis

def _normalized_truth(truth: LocationSet) -> np.ndarray:
    t = truth.t - truth.t.mean(axis=0)
    return t.ravel() / np.linalg.norm(t)


def noise_level(graph: MeasurementGraph, truth: LocationSet) -> float:
    """Largest ``|gamma - gamma0|`` over edges, with the sign of ``gamma`` chosen to match."""
    i, j = graph.edges.T
    g0 = truth.t[i] - truth.t[j]
    g0 /= np.linalg.norm(g0, axis=1, keepdims=True)
    g = graph.gammas
    err = np.minimum(np.linalg.norm(g - g0, axis=1), np.linalg.norm(g + g0, axis=1))
    return float(err.max()) if len(err) else 0.0


def stability_constants(graph: MeasurementGraph, truth: LocationSet) -> tuple[float, float]:
    """The data-dependent constants ``(alpha1, alpha2)`` of the stability bound."""
    from .core import build_cost_operators, formation_from_locations

    n, d, m = graph.n, graph.d, graph.m
    L0 = build_cost_operators(formation_from_locations(truth, graph.edges)).dense_L()
    lam0 = np.linalg.eigvalsh(L0)
    lam_d2 = lam0[d + 1]
    if lam_d2 <= 1e-10 * max(lam0[-1], 1.0):
        raise InputError("formation is flexible: the stability bound is undefined")
    LG = weighted_laplacian(n, graph.edges, np.ones(m))
    t0 = _normalized_truth(truth).reshape(n, d)
    i, j = graph.edges.T
    kappa = 1.0 / np.min(np.sum((t0[i] - t0[j]) ** 2, axis=1))
    alpha1 = math.sqrt(2) * m / lam_d2
    alpha2 = (kappa * math.sqrt(d) * np.linalg.norm(LG) / m + 1.0) * np.linalg.eigvalsh(LG)[-1] / lam_d2
    return float(alpha1), float(alpha2)


def stability_bound(graph: MeasurementGraph, truth: LocationSet, epsilon: float) -> float:
    """Upper bound on ``delta(T*, T0)`` for measurement noise of size ``epsilon``."""
    if epsilon < 0:
        raise InputError("epsilon must be non-negative")
    a1, a2 = stability_constants(graph, truth)
    return float(epsilon * (a1 + math.sqrt(a1 * a1 + 2 * a2)))


def location_bound(graph: MeasurementGraph, truth: LocationSet, epsilon: float) -> float:
    """Upper bound on ``min_a |a t_hat - t0|`` for unit-norm centered ``t0``."""
    return math.pi * graph.d * (graph.n - 1) / 2 * stability_bound(graph, truth, epsilon)


def gram_error(T_star: np.ndarray, truth: LocationSet) -> float:
    """``min_{c >= 0} |c T* - T0|_F`` with ``T0`` the unit-trace centered truth Gram."""
    t0 = _normalized_truth(truth)
    T0 = np.outer(t0, t0)
    nrm2 = float(np.sum(T_star * T_star))
    c = max(float(np.sum(T_star * T0)) / nrm2, 0.0) if nrm2 > 0 else 0.0
    return float(np.linalg.norm(c * T_star - T0))


def rounded_error(est: LocationSet, truth: LocationSet) -> float:
    """``min_a |a t_hat - t0|`` for the unit leading eigenvector ``t_hat``."""
    t0 = _normalized_truth(truth)
    v = est.t.ravel() / np.linalg.norm(est.t)
    return float(np.linalg.norm((t0 @ v) * v - t0))
