"""Synthetic experiments: graph and noise generation, NRMSE, and solver comparison tables.

Randomness comes from Philox generators keyed by ``SeedSequence(seed,
spawn_key=(cell, trial, component))`` so every cell, trial and component
(graph, locations, noise) has its own reproducible stream.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import InputError, LocationSet, MeasurementGraph, SolverError, build_cost_operators
from .distributed import solve_distributed
from .rigidity import test_parallel_rigidity
from .sdr import SdrConfig, adm_solve, least_squares_solve

log = logging.getLogger(__name__)

SOLVERS = ("sdr", "sdr-dist", "ls")
CSV_COLUMNS = ("solver", "sigma", "p", "trial", "nrmse", "spectral_gap", "seconds")
GRAPH_RETRIES = 100
RNG_NAME = "numpy Philox4x64 via SeedSequence(seed, spawn_key=(cell, trial, component))"

# stream components
_GRAPH, _LOCS, _NOISE = 0, 1, 2


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------- data generation

@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise InputError("sigma must be non-negative")
        if not 0.0 <= self.p <= 1.0:
            raise InputError("p must lie in [0, 1]")


def gen_graph(n: int, theta: float | None = None, avg_degree: float | None = None,
              min_degree: int | None = None, seed: int = 0, d: int = 3,
              max_retries: int = GRAPH_RETRIES) -> np.ndarray:
    """Random parallel-rigid graph; returns an ``(m, 2)`` edge array with ``i < j``.

    Edges are drawn independently with probability ``theta`` (default
    ``avg_degree / (n - 1)`` with ``avg_degree = n / 4``); nodes below
    ``min_degree`` (default ``ceil(3n / 100)``) then receive random extra
    neighbours. Graphs that fail the rigidity test in dimension ``d`` are
    redrawn.
    """
    if n < 2:
        raise InputError("n must be at least 2")
    if theta is None:
        avg = n / 4 if avg_degree is None else float(avg_degree)
        theta = min(1.0, avg / (n - 1))
    if not 0.0 < theta <= 1.0:
        raise InputError("theta must lie in (0, 1]")
    kmin = int(math.ceil(3 * n / 100)) if min_degree is None else int(min_degree)
    kmin = min(max(kmin, 1), n - 1)
    iu = np.triu_indices(n, 1)
    for attempt in range(max_retries):
        rng = stream(seed, attempt, _GRAPH)
        A = np.zeros((n, n), dtype=bool)
        A[iu] = rng.random(len(iu[0])) < theta
        A |= A.T
        for v in range(n):
            deficit = kmin - int(A[v].sum())
            if deficit > 0:
                cand = np.flatnonzero(~A[v])
                cand = cand[cand != v]
                pick = rng.choice(cand, size=deficit, replace=False)
                A[v, pick] = A[pick, v] = True
        edges = np.argwhere(np.triu(A, 1))
        placeholder = MeasurementGraph.from_edges(d, n, edges, np.tile(np.eye(d)[0], (len(edges), 1)))
        if test_parallel_rigidity(placeholder, d=d, seed=seed).rigid:
            return edges
        log.debug("graph attempt %d is not parallel rigid; redrawing", attempt)
    raise SolverError(f"no parallel-rigid graph after {max_retries} attempts")


def gen_locations(n: int, d: int, rng: np.random.Generator) -> LocationSet:
    return LocationSet(rng.standard_normal((n, d)))


def apply_noise(locs: LocationSet, edges: np.ndarray, spec: NoiseSpec,
                rng: np.random.Generator | None = None) -> MeasurementGraph:
    """Line measurements: uniform random directions with probability ``p``,
    else the true direction plus ``sigma`` times a standard Gaussian, normalized."""
    rng = stream(spec.seed, 0, _NOISE) if rng is None else rng
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    t = locs.t
    g0 = t[edges[:, 0]] - t[edges[:, 1]]
    g0 /= np.linalg.norm(g0, axis=1, keepdims=True)
    m, d = g0.shape
    outlier = rng.random(m) < spec.p
    gauss = rng.standard_normal((m, d))
    unif = rng.standard_normal((m, d))
    g = np.where(outlier[:, None], unif, g0 + spec.sigma * gauss)
    nrm = np.linalg.norm(g, axis=1, keepdims=True)
    if np.any(nrm == 0):  # measure-zero event; fall back to the clean direction
        g = np.where(nrm == 0, g0, g)
        nrm = np.linalg.norm(g, axis=1, keepdims=True)
    return MeasurementGraph.from_edges(d, locs.n, edges, g / nrm, normalize=False)


# ---------------------------------------------------------------- metrics

def align_and_nrmse(est: LocationSet | np.ndarray, truth: LocationSet | np.ndarray) -> float:
    """Root mean squared error after removing translation, scale and sign, relative to the spread of ``truth``."""
    e = np.asarray(getattr(est, "t", est), dtype=float)
    t = np.asarray(getattr(truth, "t", truth), dtype=float)
    if e.shape != t.shape:
        raise InputError(f"shape mismatch {e.shape} vs {t.shape}")
    t = t - t.mean(axis=0)
    e = e - e.mean(axis=0)
    den = float(np.sum(t * t))
    if den == 0.0:
        raise InputError("truth is degenerate (all points coincide)")
    ee = float(np.sum(e * e))
    c = float(np.sum(e * t)) / ee if ee > 0 else 0.0
    return math.sqrt(float(np.sum((c * e - t) ** 2)) / den)


# ---------------------------------------------------------------- experiment tables

@dataclass
class TrialRow:
    solver: str
    sigma: float
    p: float
    trial: int
    nrmse: float | None
    spectral_gap: float | None
    seconds: float | None
    error: str | None = None


@dataclass
class ExperimentReport:
    config: dict
    rows: list[TrialRow] = field(default_factory=list)
    means: dict = field(default_factory=dict)
    partial: dict = field(default_factory=dict)

    def cell_rows(self, solver: str, sigma: float, p: float) -> list[TrialRow]:
        return [r for r in self.rows if r.solver == solver and r.sigma == sigma and r.p == p]

    def mean(self, solver: str, sigma: float, p: float, key: str = "nrmse") -> float:
        vals = [getattr(r, key) for r in self.cell_rows(solver, sigma, p) if getattr(r, key) is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self, timings: bool = False) -> dict:
        rows = []
        for r in self.rows:
            row = asdict(r)
            if not timings:
                row["seconds"] = None
            rows.append(row)
        return {"config": self.config, "rows": rows, "means": self.means, "partial": self.partial}

    def write_csv(self, path, timings: bool = False) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r.solver, repr(r.sigma), repr(r.p), r.trial, _fmt(r.nrmse), _fmt(r.spectral_gap),
                            _fmt(r.seconds) if timings else ""])

    def write_json(self, path, timings: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_dict(timings), indent=2, sort_keys=True) + "\n")


def _fmt(x: float | None) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _run_solver(solver: str, graph: MeasurementGraph, truth: LocationSet, cfg: SdrConfig,
                n_max: int, seed: int) -> tuple[float, float | None]:
    if solver == "sdr":
        sol = adm_solve(build_cost_operators(graph), cfg)
        return align_and_nrmse(sol.rounded, truth), sol.spectral_gap
    if solver == "ls":
        est = least_squares_solve(build_cost_operators(graph))
        return align_and_nrmse(est, truth), None
    rep = solve_distributed(graph, cfg, n_max=n_max, seed=seed)
    keep = ~np.isnan(rep.locations).any(axis=1)
    return align_and_nrmse(rep.locations[keep], truth.t[keep]), None


def run_table(n: int, cells: list[tuple[float, float]], solvers: list[str], trials: int = 10,
              seed: int = 0, theta: float | None = None, d: int = 3, cfg: SdrConfig | None = None,
              n_max: int = 70, workers: int = 1, fixed_graph: bool = True,
              out: str | Path | None = None, timings: bool = False) -> ExperimentReport:
    """Run ``trials`` realizations per ``(sigma, p)`` cell with each solver.

    With ``fixed_graph`` one graph per cell is drawn and reused while the
    locations and noise are redrawn per trial; otherwise every trial draws its
    own graph. ``out`` writes a CSV plus a JSON report next to it.
    """
    bad = set(solvers) - set(SOLVERS)
    if bad or not solvers:
        raise InputError(f"unknown solvers {sorted(bad)}; choose from {SOLVERS}")
    if trials < 1:
        raise InputError("trials must be at least 1")
    cfg = cfg or SdrConfig()
    cells = [(float(s), float(p)) for s, p in cells]
    for s, p in cells:
        NoiseSpec(s, p)
    report = ExperimentReport(config={
        "n": n, "d": d, "theta": theta, "cells": [list(c) for c in cells], "solvers": list(solvers),
        "trials": trials, "seed": seed, "fixed_graph": fixed_graph, "n_max": n_max, "rng": RNG_NAME,
        "sdr": {k: v for k, v in asdict(cfg).items()},
    })

    def trial(job):
        ci, k, (sigma, p) = job
        gseed = int(stream(seed, ci, 0 if fixed_graph else k + 1, _GRAPH).integers(2 ** 31))
        edges = gen_graph(n, theta=theta, seed=gseed, d=d)
        truth = gen_locations(n, d, stream(seed, ci, k, _LOCS))
        graph = apply_noise(truth, edges, NoiseSpec(sigma, p), stream(seed, ci, k, _NOISE))
        rows = []
        for s in solvers:
            t0 = time.perf_counter()
            try:
                err, gap = _run_solver(s, graph, truth, cfg, n_max, seed)
                rows.append(TrialRow(s, sigma, p, k, err, gap, time.perf_counter() - t0))
            except (SolverError, InputError, np.linalg.LinAlgError) as exc:
                log.warning("trial %d of cell (%g, %g), solver %s failed: %s", k, sigma, p, s, exc)
                rows.append(TrialRow(s, sigma, p, k, None, None, time.perf_counter() - t0, str(exc)))
        return rows

    jobs = [(ci, k, c) for ci, c in enumerate(cells) for k in range(trials)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(trial, jobs))
    else:
        results = [trial(j) for j in jobs]
    for rows in results:
        report.rows.extend(rows)
    for s in solvers:
        for sigma, p in cells:
            key = f"{s}|{sigma!r}|{p!r}"
            rows = report.cell_rows(s, sigma, p)
            report.means[key] = {"nrmse": _none_nan(report.mean(s, sigma, p)),
                                 "spectral_gap": _none_nan(report.mean(s, sigma, p, "spectral_gap"))}
            report.partial[key] = any(r.error is not None for r in rows)
    if out is not None:
        out = Path(out)
        report.write_csv(out, timings)
        report.write_json(out.with_suffix(".json"), timings)
    return report


def _none_nan(x: float) -> float | None:
    return None if math.isnan(x) else x
