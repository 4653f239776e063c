"""Regenerate ``frozen.json`` from the independent oracles in ``tests/oracles.py``.

Run from the repository root:  python3 tests/data/make_frozen.py
The package under test is not imported.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

import oracles as o  # noqa: E402


def main() -> None:
    out: dict = {}

    out["contraction"] = []
    for seed in range(3):
        n, d, edges, T = o.contraction_input(seed)
        out["contraction"].append([float(np.sum(o.constraint_matrix(i, j, n, d) * T)) for i, j in edges])

    out["quadratic"] = []
    for seed in range(3):
        n, d, edges, gam, t = o.quadratic_input(seed)
        out["quadratic"].append(o.projection_cost(t, edges, gam))

    out["stability_bound"] = []
    for seed in range(5):
        n, d, edges, t0, gam, eps = o.stability_input(seed)
        out["stability_bound"].append(o.stability_bound_formula(n, d, edges, t0, eps))

    est, truth = o.nrmse_input()
    out["nrmse_one_perturbed"] = o.nrmse_by_lstsq(est, truth)

    out["mean_abs_dot_uniform"] = o.mc_mean_abs_dot_uniform(100_000, seed=0)
    out["mean_angle_sigma_0.05"] = o.mc_mean_angle_gaussian_perturbation(0.05, 100_000, seed=0)

    out["signs"] = []
    for seed in range(3):
        k, edges, zz, _ = o.signs_input(seed)
        out["signs"].append(o.brute_force_signs(k, edges, zz).tolist())

    (HERE / "frozen.json").write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
