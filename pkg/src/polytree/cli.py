"""Command-line workflow: grow, simulate, coverage, plot, export, validate.

Exit codes: 0 ok, 2 no feasible core problem, 3 user error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import milp, scenarios
from .errors import (ConfigError, CorruptFile, DimensionMismatch, EmptyTargets, Infeasible, NoInitialBranch,
                     NumericalFailure, PolytreeError)
from .milp import MilpConfig
from .pwa import PWASystem, validate_partition

EXIT_OK, EXIT_INFEASIBLE, EXIT_USER, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("polytree")


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def _nest(flat: dict) -> dict:
    """Expand dotted keys (``milp.gap_tol``) into nested dictionaries."""
    out: dict = {}
    for key, val in flat.items():
        if isinstance(val, dict):
            val = _nest(val)
        parts = str(key).split(".")
        cur = out
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        if isinstance(val, dict) and isinstance(cur.get(parts[-1]), dict):
            cur[parts[-1]].update(val)
        else:
            cur[parts[-1]] = val
    return out


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        data = yaml.safe_load(p.read_text()) if p.suffix in (".yml", ".yaml") else json.loads(p.read_text())
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    data = _nest(data)
    unknown = set(data) - {"milp", "growth", "objective", "plot"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if "milp" in data:
        bad = set(data["milp"]) - set(MilpConfig.__dataclass_fields__)
        if bad:
            raise ConfigError(f"unknown milp keys: {sorted(bad)}")
    return data


def load_system(name: str) -> PWASystem:
    path = scenarios.scenario_path(name)
    if not path.is_file():
        raise ConfigError(f"scenario {name} not found")
    try:
        return PWASystem.load(path)
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid scenario {path}: {exc}") from exc


def growth_config(system: PWASystem, cfg: dict, args):
    from .tree import GrowthConfig

    data = dict(system.meta.get("growth", {}))
    data.update(cfg.get("growth", {}))
    if "objective" in cfg:
        data["objective"] = cfg["objective"]
    if "milp" in cfg:
        data["milp"] = cfg["milp"]
    if getattr(args, "long", False) and "long_run_iterations" in system.meta:
        data["iterations"] = system.meta["long_run_iterations"]
    if getattr(args, "iters", None) is not None:
        data["iterations"] = args.iters
    if getattr(args, "t_max", None) is not None:
        data["T_max"] = args.t_max
    data["seed"] = args.seed
    try:
        return GrowthConfig.from_mapping(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad growth config: {exc}") from exc


def parse_vector(text: str, n: int) -> np.ndarray:
    try:
        v = np.array([float(t) for t in text.replace(";", ",").split(",") if t.strip()])
    except ValueError as exc:
        raise ConfigError(f"cannot parse vector {text!r}") from exc
    if v.size != n:
        raise ConfigError(f"expected {n} values, got {v.size}")
    return v


def parse_projections(items, n: int) -> list[tuple[int, int]]:
    out = []
    for item in items:
        try:
            i, j = (int(t) for t in str(item).split(","))
        except ValueError as exc:
            raise ConfigError(f"projection {item!r} must look like '0,1'") from exc
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise ConfigError(f"projection {item!r} must name two distinct coordinates below {n}")
        out.append((i, j))
    return out


def _out(args, name: str) -> Path:
    p = Path(name)
    if not p.is_absolute() and args.out_dir:
        p = Path(args.out_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


def _projections(system, args) -> list[tuple[int, int]]:
    if getattr(args, "proj", None):
        return parse_projections(args.proj, system.n)
    default = system.meta.get("projections") or ([[0, 1]] if system.n >= 2 else [])
    return parse_projections([f"{a},{b}" for a, b in default], system.n)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_grow(args, cfg) -> int:
    from . import plotting
    from .tree import grow, init_tree

    system = load_system(args.scenario)
    gc = growth_config(system, cfg, args)
    projections = _projections(system, args)

    def progress(rec):
        log.info("iter %d: %s (T=%s, nodes=%d%s)", rec["iteration"], rec["outcome"], rec["T"], rec["n_nodes"],
                 "" if rec["coverage"] is None else f", coverage={rec['coverage']:.3f}")

    tree = init_tree(system, gc)
    grow(tree, gc, progress=progress)
    tree_path = _out(args, args.out)
    tree.save(tree_path)
    rows = [r for r in tree.stats if r["iteration"] >= 0]
    _write_csv(_out(args, "stats.csv"), [dict(r, modes=None if r["modes"] is None else " ".join(map(str, r["modes"])))
                                         for r in rows],
               ["iteration", "outcome", "accepted", "T", "beta", "branch_size", "n_nodes", "target", "modes",
                "coverage", "saturated"])
    _write_csv(_out(args, "solve_times.csv"), tree.solve_log, ["iteration", "T", "outcome", "wall_time"])
    for i, j in projections:
        plotting.plot_tree(tree, (i, j), _out(args, f"tree_{i}_{j}.svg"))
    plotting.plot_coverage(tree.stats, _out(args, "coverage.svg"))
    if not args.quiet:
        acc = sum(r["accepted"] for r in rows)
        print(f"grew {len(tree)} nodes in {len(rows)} iterations ({acc} branches accepted) -> {tree_path}")
    return EXIT_OK


def _load_tree(path: str):
    from .tree import PolytopicTree

    if not Path(path).is_file():
        raise ConfigError(f"tree file {path} not found")
    return PolytopicTree.load(path)


def cmd_simulate(args, cfg) -> int:
    from . import plotting
    from .control import simulate

    tree = _load_tree(args.tree)
    system = tree.system
    x0 = parse_vector(args.x0, system.n)
    if not system.state_box.contains(x0):
        raise ConfigError("x0 lies outside the state set")
    trace = simulate(tree, system, x0, args.steps, args.norm)
    out = _out(args, args.out)
    trace.write_csv(out, system.meta.get("state_names"), system.meta.get("input_names"))
    stem = out.with_suffix("")
    plotting.plot_trace(system, trace.X, np.asarray(trace.inputs).reshape(len(trace.inputs), system.m),
                        stem.with_name(stem.name + "_signals.svg"))
    for i, j in _projections(system, args):
        plotting.plot_tree(tree, (i, j), stem.with_name(f"{stem.name}_{i}_{j}.svg"), trace=trace.X)
    if not args.quiet:
        print(f"{trace.outcome} after {trace.steps} steps, cost {trace.J:g} -> {out}")
    return EXIT_OK


def cmd_coverage(args, cfg) -> int:
    from .control import min_feasible_horizon, mpc_feasible, policy_in_tree
    from .tree import coverage_points

    tree = _load_tree(args.tree)
    system = tree.system
    rng = np.random.default_rng(args.seed)
    pts = coverage_points(system, args.n, rng) if args.n > 0 else np.empty((0, system.n))
    mcfg = MilpConfig.from_mapping(dict({"backend": "highs"}, **cfg.get("milp", {})))
    rows = []
    for k, x in enumerate(pts):
        row = {"sample": k, **{f"x{i}": float(v) for i, v in enumerate(x)}, "in_tree": tree.in_tree(x)}
        if row["in_tree"]:
            a = policy_in_tree(tree, x)
            row["node"], row["V"] = a.node, a.V
            if args.mpc_check:
                # V = 0 only on the goal box itself, where horizon 0 trivially works
                row["mpc_feasible_at_V"] = a.V < 1 or mpc_feasible(system, x, int(round(a.V)), mcfg)
            if args.t_check:
                row["mpc_horizon"] = min_feasible_horizon(system, x, args.t_check, mcfg)
        rows.append(row)
    cols = ["sample", *[f"x{i}" for i in range(system.n)], "in_tree", "node", "V", "mpc_feasible_at_V", "mpc_horizon"]
    out = _out(args, args.out)
    _write_csv(out, rows, cols)
    n_in = sum(r["in_tree"] for r in rows)
    summary = {"n_samples": len(rows), "in_tree": n_in, "fraction": n_in / len(rows) if rows else 0.0}
    if args.mpc_check:
        summary["mpc_feasible_at_V"] = sum(bool(r.get("mpc_feasible_at_V")) for r in rows)
    if args.t_check:
        summary["mpc_feasible_within_t_check"] = sum(r.get("mpc_horizon") is not None for r in rows if r["in_tree"])
    if not args.quiet:
        print(json.dumps(summary))
    return EXIT_OK


def cmd_plot(args, cfg) -> int:
    from . import plotting

    tree = _load_tree(args.tree)
    trace = None
    if args.trace:
        with open(args.trace) as fh:
            rows = list(csv.reader(fh))
        trace = np.array([[float(v) for v in r[1:1 + tree.system.n]] for r in rows[1:]])
    for i, j in _projections(tree.system, args):
        plotting.plot_tree(tree, (i, j), _out(args, f"tree_{i}_{j}.svg"), trace=trace)
    plotting.plot_coverage(tree.stats, _out(args, "coverage.svg"))
    return EXIT_OK


def cmd_export(args, cfg) -> int:
    from .traj import ObjectiveConfig, TrajectoryQuery, build_model

    system = load_system(args.scenario)
    if args.T < 1:
        raise ConfigError("horizon T must be >= 1")
    obj = ObjectiveConfig.from_mapping(cfg.get("objective"))
    tm = build_model(TrajectoryQuery(system, args.T, [system.goal], objective=obj))
    out = _out(args, args.out)
    out.write_text(milp.export_model(tm.model, "lp_text"))
    if not args.quiet:
        print(f"{tm.model.n_vars} variables, {tm.model.n_binaries} binaries, "
              f"{tm.model.n_constraints} rows -> {out}")
    return EXIT_OK


def cmd_validate(args, cfg) -> int:
    system = load_system(args.scenario)
    rep = validate_partition(system, args.samples, np.random.default_rng(args.seed))
    problems = system.validate(np.random.default_rng(args.seed))
    out = _out(args, args.out)
    _write_csv(out, [{"n_samples": rep.n_samples, "coverage": rep.coverage, "overlap": rep.overlap,
                      "problems": "; ".join(problems)}], ["n_samples", "coverage", "overlap", "problems"])
    if not args.quiet:
        print(f"coverage {rep.coverage:.4f}, overlap {rep.overlap:.4f}" + (f"; {'; '.join(problems)}" if problems else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed")
    common.add_argument("--config", help="YAML or JSON file with milp.*, growth.* and objective.* keys")
    common.add_argument("--out-dir", default=None, help="directory for all outputs")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = argparse.ArgumentParser(prog="polytree", parents=[common],
                                description="Grow and run polytopic feedback trees for PWA systems.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("grow", parents=[common], help="grow a tree for a scenario")
    g.add_argument("--scenario", required=True, help="shipped scenario name or path to a JSON file")
    g.add_argument("--iters", type=int, help="growth iterations (overrides the scenario)")
    g.add_argument("--t-max", type=int, help="longest branch horizon")
    g.add_argument("--long", action="store_true", help="use the scenario's long iteration budget")
    g.add_argument("--out", default="tree.json", help="tree file name")
    g.add_argument("--proj", nargs="*", help="projections like 0,1")
    g.set_defaults(func=cmd_grow)

    s = sub.add_parser("simulate", parents=[common], help="closed-loop simulation from x0")
    s.add_argument("--tree", required=True, help="tree JSON file")
    s.add_argument("--x0", required=True, help="comma separated state")
    s.add_argument("--steps", type=int, default=500, help="step limit")
    s.add_argument("--norm", choices=["linf", "l1"], default="linf", help="residual norm off the tree")
    s.add_argument("--out", default="trace.csv", help="trace CSV name")
    s.add_argument("--proj", nargs="*", help="projections like 0,1")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("coverage", parents=[common], help="Monte-Carlo coverage report")
    c.add_argument("--tree", required=True, help="tree JSON file")
    c.add_argument("--n", type=int, default=500, help="number of uniform samples")
    c.add_argument("--mpc-check", action="store_true", help="cross-check in-tree samples with point MPC at T=V")
    c.add_argument("--t-check", type=int, default=0,
                   help="line-search the smallest feasible point-MPC horizon up to this bound")
    c.add_argument("--out", default="coverage.csv")
    c.set_defaults(func=cmd_coverage)

    pl = sub.add_parser("plot", parents=[common], help="SVG projections of a tree")
    pl.add_argument("--tree", required=True, help="tree JSON file")
    pl.add_argument("--proj", nargs="*", help="projections like 0,1")
    pl.add_argument("--trace", help="trace CSV to overlay")
    pl.set_defaults(func=cmd_plot)

    e = sub.add_parser("export", parents=[common], help="write a trajectory MILP in LP format")
    e.add_argument("--scenario", required=True, help="shipped scenario name or path to a JSON file")
    e.add_argument("--T", type=int, required=True, help="horizon, at least 1")
    e.add_argument("--out", default="model.lp")
    e.set_defaults(func=cmd_export)

    v = sub.add_parser("validate", parents=[common], help="check a scenario's cell partition")
    v.add_argument("--scenario", required=True, help="shipped scenario name or path to a JSON file")
    v.add_argument("--samples", type=int, default=10_000, help="sample count")
    v.add_argument("--out", default="partition.csv")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except NoInitialBranch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Infeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, CorruptFile, DimensionMismatch, EmptyTargets, ValueError, PolytreeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
