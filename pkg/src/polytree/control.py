"""Online policies, closed-loop simulation and the point MPC oracle.

Inside the tree the control is an affine function of the template
parameter of the lowest-value node containing the state; no optimization
is involved. Outside the tree a few small LPs steer the next state as
close as possible to the successor set of the nearest node.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import milp
from .errors import Infeasible, NoFeasibleMode, NotInTree, OutOfPartition
from .milp import MilpConfig, MilpModel, Status
from .pwa import Affine, PWASystem, mode_of
from .tree import PolytopicTree

GOAL_TOL = 1e-6


@dataclass(frozen=True)
class InTreeAction:
    u: np.ndarray | None  # None at the root (the goal box has no law)
    node: int
    V: float


@dataclass(frozen=True)
class OutOfTreeAction:
    u: np.ndarray
    residual: float
    mode: int
    node: int


def policy_in_tree(tree: PolytopicTree, x) -> InTreeAction:
    """Law of the lowest-value node containing ``x`` (ties to the lower id)."""
    x = np.asarray(x, dtype=float)
    P = tree.stack.params(x)
    inside = np.max(np.abs(P), axis=1, initial=0.0) <= 1.0 + geo.MEMBERSHIP_TOL
    if not inside.any():
        raise NotInTree(f"no node contains {x.tolist()}")
    ids = np.flatnonzero(inside)
    best = int(ids[np.argmin(tree.values[ids])])  # argmin returns the first, i.e. lowest id, on ties
    node = tree.nodes[best]
    if node.ubar is None:
        return InTreeAction(None, best, 0.0)
    return InTreeAction(node.ubar + node.theta @ P[best], best, float(node.V))


def _x_slice_nonempty(cell: geo.HPolytope, x: np.ndarray, n: int) -> bool:
    Hu = cell.H[:, n:]
    rhs = cell.h - cell.H[:, :n] @ x
    res = milp.linprog_counted(np.zeros(Hu.shape[1]), A_ub=Hu, b_ub=rhs,
                               bounds=[(None, None)] * Hu.shape[1], method="highs")
    return res.status == 0


def policy_out_tree(tree: PolytopicTree, system: PWASystem, x, norm: str = "linf") -> OutOfTreeAction:
    """Input pushing the successor toward the child of the nearest node.

    For each mode whose cell admits ``x``, solves
    ``min ||delta||`` over ``u`` with ``(x, u)`` in the cell and
    ``A x + B u + c + delta`` in the (slightly inflated) child set, and
    keeps the best mode (lowest index on ties).
    """
    if norm not in ("linf", "l1"):
        raise ValueError(f"unsupported norm {norm!r}")
    x = np.asarray(x, dtype=float)
    n, m = system.n, system.m
    d = tree.stack.distances(x)
    near = int(np.argmin(d))
    child = tree.nodes[near].child
    target = tree.target_polytope(near if child is None else child)
    best: OutOfTreeAction | None = None
    for i, md in enumerate(system.modes):
        if not _x_slice_nonempty(md.cell, x, n):
            continue
        mdl = MilpModel("steer")
        u = mdl.add_variables(m, name="u")
        delta = mdl.add_variables(n, name="delta")
        mdl.add_constraint(md.cell.H[:, n:] @ u, "<=", md.cell.h - md.cell.H[:, :n] @ x)
        nxt = md.A @ x + md.c + md.B @ u + delta
        mdl.add_constraint(target.H @ nxt, "<=", target.h + geo.EPS)
        if norm == "linf":
            t = mdl.add_variable(0.0, name="t")
            mdl.add_constraint(delta - t, "<=", 0.0)
            mdl.add_constraint(-delta - t, "<=", 0.0)
            mdl.set_objective(t)
        else:
            s = mdl.add_variables(n, 0.0, name="s")
            mdl.add_constraint(delta - s, "<=", 0.0)
            mdl.add_constraint(-delta - s, "<=", 0.0)
            mdl.set_objective(s.sum())
        sol = milp.solve_lp(mdl)
        if sol.status is not Status.OPTIMAL:
            continue
        res = max(float(sol.objective), 0.0)
        if best is None or res < best.residual - 1e-12:
            best = OutOfTreeAction(sol.value(u), res, i, near)
    if best is None:
        raise NoFeasibleMode(f"no cell admits x = {x.tolist()}")
    return best


@dataclass
class ClosedLoopTrace:
    states: list
    inputs: list = field(default_factory=list)
    branches: list = field(default_factory=list)   # "InTree" | "OutOfTree"
    node_ids: list = field(default_factory=list)
    bounds: list = field(default_factory=list)     # V of the node used (NaN out of tree)
    costs: list = field(default_factory=list)
    outcome: str = "MaxSteps"                        # GoalReached | MaxSteps | PartitionExit
    goal_step: int | None = None
    n_inputs: int | None = None

    @property
    def J(self) -> float:
        return float(sum(self.costs))

    @property
    def steps(self) -> int:
        return len(self.inputs)

    @property
    def X(self) -> np.ndarray:
        return np.asarray(self.states)

    def write_csv(self, path: str | Path, state_names=None, input_names=None) -> None:
        n = len(self.states[0])
        m = self.n_inputs if self.n_inputs is not None else (len(self.inputs[0]) if self.inputs else 0)
        xs = state_names or [f"x{i}" for i in range(n)]
        us = input_names or [f"u{i}" for i in range(m)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *xs, *us, "branch", "node_id", "cost"])
            for t, x in enumerate(self.states):
                if t < len(self.inputs):
                    row = [t, *x, *self.inputs[t], self.branches[t], self.node_ids[t], self.costs[t]]
                else:
                    row = [t, *x, *[""] * m, self.outcome, "", ""]
                w.writerow(row)


def simulate(tree: PolytopicTree, system: PWASystem, x0, max_steps: int = 500,
             norm: str = "linf") -> ClosedLoopTrace:
    """Closed loop with the in-tree law where it applies and the steering LP elsewhere."""
    x = np.asarray(x0, dtype=float).copy()
    trace = ClosedLoopTrace([x.copy()], n_inputs=system.m)
    for t in range(max_steps + 1):
        if system.goal.contains(x, GOAL_TOL):
            trace.outcome, trace.goal_step = "GoalReached", t
            return trace
        if t == max_steps:
            break
        act = None
        if tree.in_tree(x):
            act = policy_in_tree(tree, x)
        if act is not None and act.u is not None:
            u, tag, node, bound = act.u, "InTree", act.node, act.V
        else:
            try:
                out = policy_out_tree(tree, system, x, norm)
            except NoFeasibleMode:
                trace.outcome = "PartitionExit"
                return trace
            u, tag, node, bound = out.u, "OutOfTree", out.node, float("nan")
        try:
            i = mode_of(system, x, u)
        except OutOfPartition:
            trace.outcome = "PartitionExit"
            return trace
        md = system.modes[i]
        trace.inputs.append(np.asarray(u, dtype=float).copy())
        trace.branches.append(tag)
        trace.node_ids.append(node)
        trace.bounds.append(bound)
        trace.costs.append(md.stage_cost(x, u))
        x = md.apply(x, u)
        trace.states.append(x.copy())
    trace.outcome = "MaxSteps"
    return trace


# ---------------------------------------------------------------------------
# Point MPC
# ---------------------------------------------------------------------------


@dataclass
class MpcResult:
    states: np.ndarray
    inputs: np.ndarray
    modes: np.ndarray
    objective: float
    status: Status


def point_mpc(system: PWASystem, x, T: int, config: MilpConfig | None = None) -> MpcResult:
    """Fixed-horizon mixed-integer plan from the single state ``x`` into the goal.

    Cells and dynamics are switched by per-step mode binaries with big-M
    rows; the objective is the summed stage cost. Raises ``Infeasible`` if
    no ``T``-step plan exists.
    """
    if int(T) != T or T < 1:
        raise ValueError("horizon must be a positive integer")
    T = int(T)
    n, m, nm = system.n, system.m, system.n_modes
    xlo, xhi = geo.bounding_box(system.state_box)
    ulo, uhi = geo.bounding_box(system.input_box)
    x0 = np.asarray(x, dtype=float)
    mdl = MilpModel(f"mpc_T{T}")
    X = [mdl.add_variables(n, x0, x0, "x0")]
    X += [mdl.add_variables(n, xlo, xhi, f"x{t}") for t in range(1, T + 1)]
    U = [mdl.add_variables(m, ulo, uhi, f"u{t}") for t in range(T)]
    D = []
    cost = 0.0
    affine = any(isinstance(md.stage_cost, Affine) for md in system.modes)
    for t in range(T):
        d = mdl.add_binaries(nm, f"delta{t}")
        mdl.add_sos1(d)
        D.append(d)
        z = milp.concat([X[t], U[t]])
        # with affine costs an epigraph variable takes the active mode's cost
        c_t = mdl.add_variable(name=f"cost{t}") if affine else None
        for i, md in enumerate(system.modes):
            if nm == 1:
                mdl.add_constraint(md.cell.H @ z, "<=", md.cell.h)
                mdl.add_constraint(md.A @ X[t] + md.B @ U[t] + md.c - X[t + 1], "==", 0.0)
            else:
                mdl.add_big_m(md.cell.H @ z - md.cell.h, d[i], group=f"cell{t}_{i}")
                r = md.A @ X[t] + md.B @ U[t] + md.c - X[t + 1]
                mdl.add_big_m(r, d[i], group=f"dyn{t}_{i}")
                mdl.add_big_m(-r, d[i], group=f"dyn{t}_{i}")
            sc = md.stage_cost
            if c_t is None:
                cost = cost + float(sc.w) * d[i]
            elif isinstance(sc, Affine):
                mdl.add_big_m(sc.a_x @ X[t] + sc.a_u @ U[t] + sc.b - c_t, d[i], group=f"cost{t}_{i}")
            else:
                mdl.add_big_m(float(sc.w) - c_t, d[i], group=f"cost{t}_{i}")
        if c_t is not None:
            cost = cost + c_t
    mdl.add_constraint(system.goal.H @ X[T], "<=", system.goal.h, name="goal")
    mdl.set_objective(cost)
    sol = milp.solve_milp(mdl, config or MilpConfig(backend="highs"))
    if not sol.has_solution:
        raise Infeasible(f"no {T}-step plan ({sol.status.value})")
    states = np.array([sol.value(v) for v in X])
    inputs = np.array([sol.value(v) for v in U]).reshape(T, m)
    modes = np.array([int(np.argmax(sol.value(d))) for d in D])
    return MpcResult(states, inputs, modes, float(sol.objective), sol.status)


def mpc_feasible(system: PWASystem, x, T: int, config: MilpConfig | None = None) -> bool:
    try:
        point_mpc(system, x, T, config)
    except Infeasible:
        return False
    return True


def min_feasible_horizon(system: PWASystem, x, T_max: int, config: MilpConfig | None = None) -> int | None:
    """Smallest ``T <= T_max`` with a feasible point MPC (linear search), or None."""
    for T in range(1, T_max + 1):
        if mpc_feasible(system, x, T, config):
            return T
    return None
