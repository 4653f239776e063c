"""Command-line entry point: ``linesdr <subcommand> ...``.

Exit codes: 0 success, 1 input error (bad arguments, files or data), 2 solver
failure. Diagnostics go to stderr; results go to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

import numpy as np

from .core import InputError, SolverError, load_graph, save_graph

log = logging.getLogger("linesdr")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2


class UsageError(InputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass(frozen=True)
class Opt:
    flag: str
    type: Callable | None
    default: Any
    help: str
    action: str | None = None

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


def _on_off(s: str) -> bool:
    if s not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return s == "on"


def _floats(s: str) -> list[float]:
    try:
        return [float(x) for x in str(s).split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from exc


_SDR_OPTS = [
    Opt("--mu", float, 1.0, "initial augmented-Lagrangian penalty"),
    Opt("--tol", float, 1e-6, "primal, dual and gap tolerance"),
    Opt("--max-iters", int, 20000, "iteration cap"),
    Opt("--mu-adapt", _on_off, True, "penalty adaptation (on|off)"),
]

COMMANDS: dict[str, list[Opt]] = {
    "rigidity-test": [
        Opt("--input", str, None, "measurement graph JSON"),
        Opt("--dim", int, None, "dimension to test (default: the graph's d)"),
        Opt("--components", None, False, "also extract maximal rigid components", "store_true"),
        Opt("--seed", int, 0, "seed of the random formation"),
        Opt("--epsilon", float, 1e-8, "relative eigenvalue threshold"),
    ],
    "solve": [
        Opt("--input", str, None, "measurement graph JSON"),
        Opt("--out", str, None, "solution JSON"),
        *_SDR_OPTS,
        Opt("--seed", int, 0, "seed of the starting point"),
    ],
    "solve-dist": [
        Opt("--input", str, None, "measurement graph JSON"),
        Opt("--out", str, None, "report JSON"),
        Opt("--nmax", int, 70, "maximum patch size"),
        Opt("--workers", int, 1, "parallel patch solves"),
        *_SDR_OPTS,
        Opt("--seed", int, 0, "seed for patch refinement and solver starts"),
    ],
    "camera-lines": [
        Opt("--input", str, None, "relative rotations and correspondences JSON"),
        Opt("--out", str, None, "measurement graph JSON"),
        Opt("--rounds", int, 10, "maximum robust rotation rounds"),
        Opt("--rule", str, "mean2sigma", "outlier rule: mean2sigma or topfrac:x"),
        Opt("--workers", int, 1, "parallel per-edge line fits"),
        Opt("--report", str, None, "optional JSON with camera indices and dropped edges"),
    ],
    "bench": [
        Opt("--n", int, 100, "number of locations"),
        Opt("--sigma", _floats, [0.0], "Gaussian noise levels (comma-separated)"),
        Opt("--p", _floats, [0.0], "outlier probabilities (comma-separated)"),
        Opt("--trials", int, 10, "realizations per cell"),
        Opt("--solvers", str, "sdr,ls", "comma-separated subset of sdr,sdr-dist,ls"),
        Opt("--seed", int, 0, "master seed"),
        Opt("--out", str, None, "CSV report (a JSON report is written next to it)"),
        Opt("--theta", float, None, "edge probability (default: average degree n/4)"),
        Opt("--fresh-graph", None, False, "draw a new graph per trial", "store_true"),
        Opt("--nmax", int, 70, "patch size for sdr-dist"),
        Opt("--workers", int, 1, "parallel trials"),
        *_SDR_OPTS,
    ],
}

REQUIRED = {
    "rigidity-test": ("input",),
    "solve": ("input", "out"),
    "solve-dist": ("input", "out"),
    "camera-lines": ("input", "out"),
    "bench": ("out",),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="linesdr", description="Location estimation from pairwise lines.")
    p.add_argument("--config", help="TOML file with option values (flags take precedence)")
    p.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="stderr log level")
    p.add_argument("--timings", action="store_true", help="include wall-clock timings in outputs")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name)
        for o in opts:
            kw = {"dest": o.dest, "default": argparse.SUPPRESS, "help": o.help}
            if o.action:
                kw["action"] = o.action
            else:
                kw["type"] = o.type
            sp.add_argument(o.flag, **kw)
    return p


def _load_config(path: str, command: str) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise InputError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"{path}: {exc}") from exc
    # either a flat table or one table per subcommand
    table = raw.get(command, {}) if any(isinstance(v, dict) for v in raw.values()) else raw
    sectioned = any(isinstance(v, dict) for v in raw.values())
    for k, v in raw.items():
        if sectioned and (not isinstance(v, dict) or k not in COMMANDS):
            raise InputError(f"{path}: unknown section or top-level key {k!r}")
    known = {o.dest: o for o in COMMANDS[command]}
    out = {}
    for k, v in table.items():
        key = k.replace("-", "_")
        if key not in known:
            raise InputError(f"{path}: unknown key {k!r} for {command}")
        try:
            out[key] = _coerce(known[key], v)
        except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
            raise InputError(f"{path}: bad value for {k!r}: {v!r}") from exc
    return out


def _coerce(o: Opt, v):
    if o.action == "store_true" or (o.type is _on_off and isinstance(v, bool)):
        if not isinstance(v, bool):
            raise TypeError("expected a boolean")
        return v
    if o.type is _floats:
        return [float(x) for x in (v if isinstance(v, list) else [v])]
    if isinstance(v, (list, dict)):
        raise TypeError("expected a scalar")
    return o.type(v)


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags and validate paths."""
    cmd = args.command
    vals = {o.dest: o.default for o in COMMANDS[cmd]}
    if args.config:
        vals.update(_load_config(args.config, cmd))
    vals.update({k: v for k, v in vars(args).items() if k in vals})
    for k in REQUIRED[cmd]:
        if vals.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")
    if "input" in vals and vals["input"] is not None and not Path(vals["input"]).is_file():
        raise InputError(f"input file not found: {vals['input']}")
    for k in ("out", "report"):
        if vals.get(k) is not None:
            parent = Path(vals[k]).resolve().parent
            if not parent.is_dir():
                raise InputError(f"output directory does not exist: {parent}")
            if "input" in vals and vals["input"] and Path(vals[k]).resolve() == Path(vals["input"]).resolve():
                raise InputError("output path must differ from the input path")
    return vals


def _sdr_config(v: dict):
    from .sdr import SdrConfig
    return SdrConfig(mu=v["mu"], max_iters=v["max_iters"], mu_adapt=v["mu_adapt"],
                     seed=v.get("seed", 0)).with_tol(v["tol"])


def _write_json(path: str | None, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# ---------------------------------------------------------------- subcommands

def cmd_rigidity(v: dict, timings: bool) -> int:
    from .rigidity import test_parallel_rigidity
    graph, _ = load_graph(v["input"])
    rep = test_parallel_rigidity(graph, d=v["dim"], seed=v["seed"], epsilon=v["epsilon"],
                                 components=v["components"])
    _write_json(None, rep.to_dict())
    return EXIT_OK


def cmd_solve(v: dict, timings: bool) -> int:
    from .bench import align_and_nrmse
    from .sdr import solve
    graph, truth = load_graph(v["input"])
    if not graph.is_connected():
        raise InputError("graph is disconnected; locations are not determined")
    sol = solve(graph, _sdr_config(v))
    out = sol.to_dict()
    if truth is not None:
        out["nrmse"] = align_and_nrmse(sol.rounded, truth)
    if timings:
        out["seconds"] = sol.seconds
    _write_json(v["out"], out)
    return EXIT_OK


def cmd_solve_dist(v: dict, timings: bool) -> int:
    from .bench import align_and_nrmse
    from .distributed import solve_distributed
    graph, truth = load_graph(v["input"])
    if v["nmax"] < 3:
        raise InputError("--nmax must be at least 3")
    rep = solve_distributed(graph, _sdr_config(v), n_max=v["nmax"], workers=v["workers"], seed=v["seed"])
    out = rep.to_dict(timings=timings)
    if truth is not None:
        keep = ~np.isnan(rep.locations).any(axis=1)
        out["nrmse"] = align_and_nrmse(rep.locations[keep], truth.t[keep])
    _write_json(v["out"], out)
    return EXIT_OK


def cmd_camera(v: dict, timings: bool) -> int:
    from .camera import build_line_graph, load_rotation_graph, parse_rule, robust_rotations
    parse_rule(v["rule"])
    rg = load_rotation_graph(v["input"])
    rob = robust_rotations(rg.n, rg.edges, rg.rotations, rounds=v["rounds"], rule=v["rule"])
    res = build_line_graph(rg, rob.rotations, rob.edge_mask, workers=v["workers"])
    save_graph(v["out"], res.graph)
    log.info("kept %d of %d cameras, %d edges; rounds=%d", len(res.cameras), rg.n, res.graph.m, rob.rounds)
    if v["report"]:
        _write_json(v["report"], {
            "cameras": res.cameras.tolist(),
            "dropped_edges": [list(e) for e in res.dropped_edges],
            "pruned_edges": int(rg.m - rob.edge_mask.sum()),
            "zero_samples": res.zero_samples,
            "rounds": rob.rounds,
            "mean_consistency_errors": rob.mean_errors,
        })
    return EXIT_OK


def cmd_bench(v: dict, timings: bool) -> int:
    from .bench import run_table
    cells = [(s, p) for s in v["sigma"] for p in v["p"]]
    solvers = [s.strip() for s in v["solvers"].split(",") if s.strip()]
    run_table(v["n"], cells, solvers, trials=v["trials"], seed=v["seed"], theta=v["theta"],
              cfg=_sdr_config(v), n_max=v["nmax"], workers=v["workers"],
              fixed_graph=not v["fresh_graph"], out=v["out"], timings=timings)
    return EXIT_OK


HANDLERS = {
    "rigidity-test": cmd_rigidity,
    "solve": cmd_solve,
    "solve-dist": cmd_solve_dist,
    "camera-lines": cmd_camera,
    "bench": cmd_bench,
}


def _setup_logging(level: str) -> None:
    root = logging.getLogger("linesdr")
    root.handlers.clear()
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("level=%(levelname)s logger=%(name)s msg=%(message)s"))
    root.addHandler(h)
    root.setLevel(level)
    root.propagate = False


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"linesdr: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    _setup_logging(args.log_level)
    try:
        vals = resolve(args)
        return HANDLERS[args.command](vals, args.timings)
    except SolverError as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    except (InputError, OSError) as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
