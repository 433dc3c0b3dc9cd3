"""Acceptance criteria 1-10, one test each.

Every test records a single PASS/FAIL line (shown in the terminal summary)
before asserting. Criteria 5-10 share two seeded growth runs built once per
module: the pendulum with its shipped settings and the bouncing ball at
``T_max = 20`` for 100 iterations.
"""

import itertools
import time
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.optimize import linprog

from conftest import ACCEPTANCE
from oracles import image_vertices, inside_hull_of, random_containment_instance, random_hull_polytope, vertices_inside
from polytree import cli, milp, scenarios
from polytree import geometry as geo
from polytree.control import min_feasible_horizon, mpc_feasible, policy_in_tree, simulate
from polytree.geometry import AHPolytope, HPolytope
from polytree.milp import MilpConfig, MilpModel, Status
from polytree.tree import coverage_points, grow, init_tree

pytestmark = pytest.mark.slow


def verdict(k: int, ok: bool, detail: str) -> None:
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append((k, line))
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# Shared growth runs
# ---------------------------------------------------------------------------


def _run(name: str, **overrides):
    system = scenarios.load(name)
    args = SimpleNamespace(seed=0, long=False, iters=overrides.get("iters"), t_max=overrides.get("t_max"))
    cfg = cli.growth_config(system, {}, args)
    t0 = time.perf_counter()
    tree = init_tree(system, cfg)
    grow(tree, cfg)
    return SimpleNamespace(system=system, config=cfg, tree=tree, seconds=time.perf_counter() - t0)


@pytest.fixture(scope="module")
def pendulum_run():
    return _run("pendulum_wall")


@pytest.fixture(scope="module")
def ball_run():
    return _run("bouncing_ball", iters=100, t_max=20)


@pytest.fixture(scope="module")
def ball_samples(ball_run):
    """The 500-point evaluation set and its in-tree members."""
    pts = coverage_points(ball_run.system, 500, np.random.default_rng(500))
    inside = [x for x in pts if ball_run.tree.in_tree(x)]
    return pts, inside


# ---------------------------------------------------------------------------
# 1-4: geometry and solver oracles
# ---------------------------------------------------------------------------


def _multi_feasible(Q, q, Y, targets, relax=False):
    m = MilpModel()
    geo.encode_containment(m, Q, q, Y, targets, relax=relax)
    if relax:
        return milp.solve_lp(m).status is Status.OPTIMAL
    return milp.solve_milp(m).status is Status.OPTIMAL


def test_criterion_1_containment_lemma():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    single = 0
    for k in range(200):
        d = 2 if k < 100 else 3
        Q, q, Z = random_containment_instance(rng, d)
        Y = HPolytope.box(-np.ones(d), np.ones(d))
        single += geo.check_containment(Q, q, Y, Z) != vertices_inside(image_vertices(Q, q), Z)
    multi, positives = 0, 0
    for k in range(100):
        d = 2 if k % 2 == 0 else 3
        Y = HPolytope.box(-np.ones(d), np.ones(d))
        targets = [random_hull_polytope(rng, d, rng.uniform(-0.5, 0.5, d), 1.0)[0]
                   for _ in range(rng.integers(2, 4))]
        Q = rng.uniform(0.05, 0.3) * rng.normal(size=(d, d))
        q = rng.uniform(-0.5, 0.5, d)
        oracle = any(vertices_inside(image_vertices(Q, q), Z) for Z in targets)
        positives += oracle
        multi += _multi_feasible(Q, q, Y, targets) != oracle
    dt = time.perf_counter() - t0
    ok = single == 0 and multi == 0 and dt < 30 and 0 < positives < 100
    verdict(1, ok, f"single-target disagreements {single}/200, multi-target {multi}/100 "
                   f"({positives} contained), {dt:.1f} s")


def test_criterion_2_relaxation_property():
    rng = np.random.default_rng(2)
    disagree, relaxed_hits, hull_hits = 0, 0, 0
    for _ in range(50):
        targets, pts = [], []
        for _ in range(rng.integers(2, 4)):
            Z, V = random_hull_polytope(rng, 2, rng.uniform(-1, 1, 2), 0.6)
            targets.append(Z)
            pts.append(V)
        Q = rng.uniform(0.05, 0.5) * rng.normal(size=(2, 2))
        q = rng.uniform(-0.7, 0.7, 2)
        relaxed = _multi_feasible(Q, q, HPolytope.box([-1, -1], [1, 1]), targets, relax=True)
        hull = inside_hull_of(np.vstack(pts), image_vertices(Q, q))
        relaxed_hits += relaxed
        hull_hits += hull
        disagree += relaxed != hull
    verdict(2, disagree == 0, f"relaxed-vs-hull disagreements {disagree}/50 "
                              f"(relaxed feasible {relaxed_hits}, hull contained {hull_hits})")


def _enumerate(model: MilpModel) -> float:
    """Brute force over binaries with scipy's LP on the compiled matrices."""
    cm = model.compile()
    A = cm.A.toarray()
    fin_hi, fin_lo = np.isfinite(cm.row_hi), np.isfinite(cm.row_lo)
    A_ub = np.vstack([A[fin_hi], -A[fin_lo]])
    b_ub = np.concatenate([cm.row_hi[fin_hi], -cm.row_lo[fin_lo]])
    ints = np.flatnonzero(cm.integrality)
    best = np.inf
    for bits in itertools.product((0.0, 1.0), repeat=ints.size):
        lb, ub = cm.lb.copy(), cm.ub.copy()
        lb[ints] = ub[ints] = bits
        bounds = [(None if np.isinf(a) else a, None if np.isinf(b) else b) for a, b in zip(lb, ub)]
        res = linprog(cm.c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
        if res.status == 0:
            best = min(best, res.fun + cm.c0)
    return best


def test_criterion_3_milp_oracle():
    from test_milp import random_milp

    rng = np.random.default_rng(3)
    worst, mismatches, solve_time = 0.0, 0, 0.0
    for k in range(100):
        m = random_milp(rng, int(rng.integers(1, 11)), int(rng.integers(1, 21)))
        best = _enumerate(m)
        t0 = time.perf_counter()
        sol = milp.solve_milp(m)
        solve_time += time.perf_counter() - t0
        if np.isinf(best):
            mismatches += sol.status is not Status.INFEASIBLE
            continue
        err = abs(sol.objective - best) if sol.has_solution else np.inf
        worst = max(worst, err)
        mismatches += err > 1e-6
    verdict(3, mismatches == 0 and solve_time < 60,
            f"mismatches {mismatches}/100, worst |diff| {worst:.1e}, solver time {solve_time:.1f} s")


def test_criterion_4_distance_consistency():
    rng = np.random.default_rng(4)
    tol = max(1e-4, 3 * geo.EPS)
    disagree, membership_bad, worst = 0, 0, 0.0
    for _ in range(500):
        n = int(rng.integers(2, 4))
        G = rng.normal(size=(n, n))
        while abs(np.linalg.det(G)) < 1e-2:
            G = rng.normal(size=(n, n))
        node = AHPolytope(rng.normal(size=n), G)
        x = node.xbar + G @ rng.uniform(-2, 2, size=n)
        d15 = geo.distance_to_node(x, node)
        d14 = geo.lp_distance(x, node)
        worst = max(worst, abs(d15 - d14))
        disagree += abs(d15 - d14) > tol
        inside, _ = geo.point_membership(x, node)
        membership_bad += inside != (d15 <= geo.MEMBERSHIP_TOL) or inside != (d14 <= geo.MEMBERSHIP_TOL)
    verdict(4, disagree == 0 and membership_bad == 0,
            f"closed-form vs LP disagreements {disagree}/500 (worst {worst:.3g}, tol {tol:g}), "
            f"membership mismatches {membership_bad}")


# ---------------------------------------------------------------------------
# 5-6: pendulum run
# ---------------------------------------------------------------------------


def _flow_violations(tree, system, rng, n_samples=1000, tol=1e-6):
    """Re-check every accepted step: cell membership and landing in the child set."""
    cell_bad = flow_bad = 0
    for v in tree.nodes[1:]:
        P = rng.uniform(-1, 1, size=(n_samples, v.polytope.n_p))
        X = v.polytope.xbar + P @ v.polytope.G.T
        U = v.ubar + P @ v.theta.T
        md = system.modes[v.mode]
        cell_bad += int(np.sum(~md.cell.contains_many(np.hstack([X, U]), tol)))
        Xn = X @ md.A.T + U @ md.B.T + md.c
        if v.child == 0:
            flow_bad += int(np.sum(~system.goal.contains_many(Xn, tol)))
        else:
            child = tree.nodes[v.child].polytope
            Pn = (Xn - child.xbar) @ child.G_eps_inv().T
            flow_bad += int(np.sum(np.max(np.abs(Pn), axis=1) > 1 + tol))
    return cell_bad, flow_bad


def test_criterion_5_funnel_soundness(pendulum_run):
    run = pendulum_run
    p = run.system.meta["params"]
    params_ok = (p["wall"] == 0.1 and p["K"] == 1000 and run.system.dt == 0.01
                 and p["u_max"] == pytest.approx(0.4 * p["g"]))
    stats = [r for r in run.tree.stats if r["iteration"] >= 0]
    branches = sum(r["accepted"] for r in run.tree.stats)
    cell_bad, flow_bad = _flow_violations(run.tree, run.system, np.random.default_rng(5))
    ok = (params_ok and len(stats) == 60 and branches > 1 and cell_bad == 0 and flow_bad == 0
          and run.seconds < 20 * 60)
    verdict(5, ok, f"{branches} branches / {len(run.tree) - 1} sets, cell violations {cell_bad}, "
                   f"flow violations {flow_bad} (1000 samples each), run {run.seconds:.0f} s")


def test_criterion_6_cost_bound(pendulum_run):
    run = pendulum_run
    rng = np.random.default_rng(6)
    states = []
    while len(states) < 100:
        states += [x for x in coverage_points(run.system, 5000, rng) if run.tree.in_tree(x)]
    violations = 0
    for x in states[:100]:
        V = policy_in_tree(run.tree, x).V
        tr = simulate(run.tree, run.system, x)
        violations += tr.outcome != "GoalReached" or tr.goal_step > V or tr.J > V + 1e-6
    verdict(6, violations == 0, f"violations {violations}/100 in-tree pendulum states")


# ---------------------------------------------------------------------------
# 7-9: bouncing-ball run
# ---------------------------------------------------------------------------


def test_criterion_7_bouncing_ball(ball_run, ball_samples):
    run = ball_run
    s = run.system
    impact = set(s.meta.get("impact_modes", []))
    early = [r["iteration"] for r in run.tree.stats
             if 0 <= r["iteration"] < 10 and r["accepted"] and impact & set(r["modes"] or [])]
    v_max = float(s.meta["params"]["v_max"])
    params_ok = (s.dt == 0.02 and s.meta["params"]["u_max"] == 3.0 and v_max == 5.0
                 and np.allclose(geo.bounding_box(s.goal), [[1.0, -0.5], [1.2, 0.5]]))
    _, inside = ball_samples
    worst_v = 0.0
    for x in inside:
        worst_v = max(worst_v, float(np.abs(simulate(run.tree, s, x).X[:, 1]).max()))
    cov = {r["iteration"]: r["coverage"] for r in run.tree.stats if r.get("coverage") is not None}
    c10, c100 = cov.get(9), cov.get(99)
    ok = (params_ok and bool(early) and worst_v <= v_max + 1e-6 and c10 is not None and c100 is not None
          and c100 > c10 and run.seconds < 45 * 60)
    verdict(7, ok, f"(a) impact branches at iterations {early}, (b) max |v| {worst_v:.4f} over "
                   f"{len(inside)} runs, (c) coverage {c10} at K=10 -> {c100} at K=100, run {run.seconds:.0f} s")


def test_criterion_8_mpc_cross_tab(ball_run, ball_samples):
    run = ball_run
    cfg = MilpConfig(backend="highs")
    _, inside = ball_samples
    at_v_fail, horizon_fail = 0, 0
    for x in inside:
        V = int(round(policy_in_tree(run.tree, x).V))
        feasible_at_v = V == 0 or mpc_feasible(run.system, x, V, cfg)
        at_v_fail += not feasible_at_v
        # "feasible at horizon 80" means some plan of at most 80 steps exists
        if not (feasible_at_v and V <= 80):
            horizon_fail += min_feasible_horizon(run.system, x, 80, cfg) is None
    verdict(8, at_v_fail == 0 and horizon_fail == 0,
            f"{len(inside)}/500 samples in tree, MPC-infeasible at T=V: {at_v_fail}, "
            f"no plan within 80 steps: {horizon_fail}")


def test_criterion_9_policy_latency(ball_run, ball_samples):
    run = ball_run
    _, inside = ball_samples
    before = milp.solver_calls()
    times = []
    for x in inside:
        t0 = time.perf_counter()
        policy_in_tree(run.tree, x)
        times.append(time.perf_counter() - t0)
    calls = milp.solver_calls() - before
    median_ms = 1e3 * float(np.median(times))
    verdict(9, calls == 0 and median_ms < 1.0,
            f"solver calls {calls} over {len(inside)} evaluations, median {median_ms:.3f} ms "
            f"on {len(run.tree)} nodes")


# ---------------------------------------------------------------------------
# 10: determinism
# ---------------------------------------------------------------------------


def test_criterion_10_determinism(pendulum_run, tmp_path):
    rc = cli.main(["grow", "--scenario", "pendulum_wall", "--seed", "0", "--out-dir", str(tmp_path), "--quiet"])
    first = pendulum_run.tree.dumps().encode()
    second = (tmp_path / "tree.json").read_bytes()
    verdict(10, rc == 0 and first == second,
            f"two seeded pendulum runs: {len(first)} vs {len(second)} bytes, identical={first == second}")
