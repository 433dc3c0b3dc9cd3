"""Trees of polytopic funnels grown backward from the goal.

Every non-root node stores a parallelotope, the affine law applied on it
and the node its successors land in. Node values follow
``V = C + V(child)`` with ``V(root) = 0``; ``C`` is the worst stage cost
over the node.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import geometry as geo
from . import milp
from .errors import CorruptFile, Infeasible, NoInitialBranch, VolumeRejected
from .geometry import AHPolytope, HPolytope
from .milp import MilpConfig
from .pwa import Constant, PWASystem
from .traj import (NearPoint, ObjectiveConfig, PolytopicTrajectory, TrajectoryQuery, check_soundness,
                   rank_fallback, solve_trajectory)

log = logging.getLogger(__name__)

SCHEMA = "polytree.tree/1"


@dataclass
class TreeNode:
    id: int
    polytope: AHPolytope
    ubar: np.ndarray | None = None
    theta: np.ndarray | None = None
    mode: int | None = None
    child: int | None = None
    C: float = 0.0
    V: float = 0.0
    iteration: int = -1

    @property
    def is_root(self) -> bool:
        return self.child is None

    def control(self, p: np.ndarray) -> np.ndarray:
        return self.ubar + self.theta @ p

    def to_dict(self) -> dict:
        d = {"id": self.id, **self.polytope.to_dict(), "mode": self.mode, "child": self.child,
             "C": float(self.C), "V": float(self.V), "iteration": self.iteration}
        d["ubar"] = None if self.ubar is None else self.ubar.tolist()
        d["theta"] = None if self.theta is None else self.theta.tolist()
        return d


@dataclass
class GrowthConfig:
    T_max: int = 10
    iterations: int = 60
    seed: int = 0
    k: int = 20
    beta_mean_final: float = 0.3
    n_reject: int = 200
    min_volume: float = 1e-6
    min_sigma: float = 1e-4
    soundness_samples: int = 1000
    coverage_samples: int = 500
    coverage_every: int = 10
    rank_fallback: bool = False
    dynamics: str = "big_m"
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    milp: MilpConfig = field(default_factory=lambda: MilpConfig(backend="highs", gap_tol=1e-3))

    def __post_init__(self):
        if self.T_max < 1 or self.iterations < 0 or self.k < 1:
            raise ValueError("T_max and k must be positive and iterations nonnegative")

    @classmethod
    def from_mapping(cls, data: dict | None) -> "GrowthConfig":
        data = dict(data or {})
        kw = {k: data[k] for k in cls.__dataclass_fields__ if k in data and k not in ("objective", "milp")}
        cfg = cls(**kw)
        if "objective" in data:
            cfg.objective = ObjectiveConfig.from_mapping(data["objective"])
        if "milp" in data:
            base = asdict(cfg.milp)
            base.update(data["milp"])
            cfg.milp = MilpConfig.from_mapping(base)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


class PolytopicTree:
    def __init__(self, system: PWASystem, seed: int = 0):
        self.system = system
        self.seed = seed
        self.nodes: list[TreeNode] = []
        self.stack = geo.NodeStack(system.n)
        self.stats: list[dict] = []
        self.solve_log: list[dict] = []  # wall times, kept out of the tree file
        self._targets_h: dict[int, HPolytope] = {}
        self._values = np.zeros(16)

    # -- structure ------------------------------------------------------------
    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    @property
    def goal(self) -> HPolytope:
        return self.system.goal

    def _append(self, node: TreeNode) -> TreeNode:
        node.id = len(self.nodes)
        if node.id == self._values.size:
            self._values = np.resize(self._values, 2 * node.id)
        self._values[node.id] = node.V
        self.nodes.append(node)
        self.stack.append(node.polytope)
        return node

    @property
    def values(self) -> np.ndarray:
        """Node values ``V`` indexed by id."""
        return self._values[:len(self.nodes)]

    def set_root(self) -> TreeNode:
        if self.nodes:
            raise ValueError("tree already has a root")
        lo, hi = geo.max_inscribed_box(self.goal)
        return self._append(TreeNode(0, AHPolytope((lo + hi) / 2, np.diag((hi - lo) / 2))))

    def add_branch(self, traj: PolytopicTrajectory, target_id: int, iteration: int = -1) -> list[int]:
        """Insert the ``T`` sets of ``traj``; the last one flows into ``target_id``."""
        if not 0 <= target_id < len(self.nodes):
            raise ValueError(f"unknown target node {target_id}")
        child, ids = target_id, []
        for tau in range(traj.T - 1, -1, -1):
            node = TreeNode(-1, traj.polytope(tau), traj.ubar[tau].copy(), traj.theta[tau].copy(),
                            int(traj.modes[tau]), child, iteration=iteration)
            node.C = node_cost(node, self.system)
            node.V = node.C + self.nodes[child].V
            child = self._append(node).id
            ids.append(child)
        return ids[::-1]

    def target_polytope(self, node_id: int) -> HPolytope:
        """Halfspace form used for terminal containment (the goal itself for the root)."""
        if node_id == 0:
            return self.goal
        if node_id not in self._targets_h:
            self._targets_h[node_id] = self.nodes[node_id].polytope.to_hpolytope()
        return self._targets_h[node_id]

    def path_to_root(self, node_id: int) -> list[int]:
        path = [node_id]
        while self.nodes[path[-1]].child is not None:
            path.append(self.nodes[path[-1]].child)
            if len(path) > len(self.nodes):
                raise CorruptFile("child pointers form a cycle")
        return path

    def containing(self, x, tol: float = geo.MEMBERSHIP_TOL) -> np.ndarray:
        """Ids of nodes whose (regularized) polytope contains ``x``."""
        return np.flatnonzero(self.stack.inside(x, tol))

    def in_tree(self, x) -> bool:
        return bool(self.stack.inside(x).any())

    def check_values(self, tol: float = 1e-9) -> float:
        """Largest violation of ``V = C + V(child)``; raises on cycles."""
        worst = abs(self.root.V)
        for v in self.nodes[1:]:
            self.path_to_root(v.id)
            worst = max(worst, abs(v.V - v.C - self.nodes[v.child].V))
        return worst

    # -- serialization ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {"schema": SCHEMA, "seed": self.seed, "system": self.system.to_dict(),
                "nodes": [v.to_dict() for v in self.nodes], "stats": self.stats}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, data: Any) -> "PolytopicTree":
        return deserialize(data)

    @classmethod
    def load(cls, path: str | Path) -> "PolytopicTree":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise CorruptFile(f"{path}: {exc}") from exc
        return deserialize(text)


def serialize(tree: PolytopicTree) -> str:
    return tree.dumps()


def _field(d: dict, key: str, where: str):
    if key not in d:
        raise CorruptFile(f"{where}: missing field {key!r}")
    return d[key]


def deserialize(source: str | dict) -> PolytopicTree:
    """Rebuild a tree, checking structure and recomputing ``C`` and ``V``."""
    if isinstance(source, str):
        if not source.strip():
            raise CorruptFile("empty tree file")
        try:
            data = json.loads(source)
        except json.JSONDecodeError as exc:
            raise CorruptFile(f"line {exc.lineno}: {exc.msg}") from exc
    else:
        data = source
    if not isinstance(data, dict):
        raise CorruptFile("top level must be an object")
    if _field(data, "schema", "tree") != SCHEMA:
        raise CorruptFile(f"unsupported schema {data['schema']!r}")
    try:
        system = PWASystem.from_dict(_field(data, "system", "tree"))
    except CorruptFile:
        raise
    except Exception as exc:
        raise CorruptFile(f"system: {exc}") from exc
    raw = _field(data, "nodes", "tree")
    if not isinstance(raw, list) or not raw:
        raise CorruptFile("nodes: a root node is mandatory")
    tree = PolytopicTree(system, int(data.get("seed", 0)))
    for k, d in enumerate(raw):
        where = f"nodes[{k}]"
        try:
            if int(_field(d, "id", where)) != k:
                raise CorruptFile(f"{where}.id: expected {k}, got {d['id']}")
            poly = AHPolytope.from_dict(d)
            child = _field(d, "child", where)
            node = TreeNode(k, poly, None if d.get("ubar") is None else np.asarray(d["ubar"], float),
                            None if d.get("theta") is None else np.atleast_2d(np.asarray(d["theta"], float)),
                            None if d.get("mode") is None else int(d["mode"]),
                            None if child is None else int(child),
                            float(_field(d, "C", where)), float(_field(d, "V", where)), int(d.get("iteration", -1)))
        except CorruptFile:
            raise
        except Exception as exc:
            raise CorruptFile(f"{where}: {exc}") from exc
        if (k == 0) != (node.child is None):
            raise CorruptFile(f"{where}.child: only the root (node 0) may lack a child")
        if node.child is not None and not 0 <= node.child < len(raw):
            raise CorruptFile(f"{where}.child: {node.child} is not a node id")
        if k > 0 and (node.ubar is None or node.theta is None or node.mode is None
                      or not 0 <= node.mode < system.n_modes):
            raise CorruptFile(f"{where}: non-root node needs ubar, theta and a valid mode")
        tree._append(node)
    for v in tree.nodes:
        hops, cur = 0, v
        while cur.child is not None:
            cur = tree.nodes[cur.child]
            hops += 1
            if hops > len(tree.nodes):
                raise CorruptFile(f"nodes[{v.id}].child: pointers form a cycle")
    if tree.root.V != 0.0 or tree.root.C != 0.0:
        raise CorruptFile("nodes[0]: root must have C = V = 0")
    V = {0: 0.0}

    def value(i: int) -> float:
        chain = []
        while i not in V:
            chain.append(i)
            i = tree.nodes[i].child
        for j in reversed(chain):
            V[j] = node_cost(tree.nodes[j], system) + V[tree.nodes[j].child]
        return V[chain[0]] if chain else V[i]

    for v in tree.nodes[1:]:
        C = node_cost(v, system)
        if abs(C - v.C) > 1e-9 or abs(value(v.id) - v.V) > 1e-9:
            raise CorruptFile(f"nodes[{v.id}]: stored C/V disagree with recomputed {C}/{V[v.id]}")
    tree.stats = list(data.get("stats", []))
    return tree


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------


def node_cost(node: TreeNode, system: PWASystem) -> float:
    """Worst stage cost over the node and its law (closed form on the unit cube)."""
    if node.mode is None:
        return 0.0
    cost = system.modes[node.mode].stage_cost
    if isinstance(cost, Constant):
        return float(cost.w)
    a = np.concatenate([cost.a_x, cost.a_u])
    center = np.concatenate([node.polytope.xbar, node.ubar])
    M = np.vstack([node.polytope.G, node.theta])
    return float(cost.b + a @ center + np.abs(M.T @ a).sum())


def node_cost_lp(node: TreeNode, system: PWASystem) -> float:
    """The same maximum computed by an LP over the template parameter."""
    if node.mode is None:
        return 0.0
    cost = system.modes[node.mode].stage_cost
    if isinstance(cost, Constant):
        return float(cost.w)
    a = np.concatenate([cost.a_x, cost.a_u])
    M = np.vstack([node.polytope.G, node.theta])
    P = node.polytope.template.poly
    res = milp.linprog_counted(-(M.T @ a), A_ub=P.H, b_ub=P.h, bounds=[(None, None)] * P.dim, method="highs")
    center = np.concatenate([node.polytope.xbar, node.ubar])
    return float(cost.b + a @ center - res.fun)


# ---------------------------------------------------------------------------
# Growth
# ---------------------------------------------------------------------------


class StateSampler:
    """Persistent hit-and-run chain over the state set."""

    def __init__(self, poly: HPolytope, rng: np.random.Generator, thin: int = 10):
        self.poly, self.rng, self.thin = poly, rng, thin
        self.x = geo.hit_and_run_sample(poly, rng, burn_in=50)

    def draw(self) -> np.ndarray:
        self.x = geo.hit_and_run(self.poly, self.rng, 1, burn_in=self.thin, x0=self.x)[0]
        return self.x.copy()


def sample_outside(tree: PolytopicTree, sampler: StateSampler, n_reject: int = 200) -> tuple[np.ndarray, bool]:
    """Draw states until one lies outside every node.

    Returns ``(x, saturated)``; after ``n_reject`` failures the sample
    farthest from the tree is returned with ``saturated=True``.
    """
    best, best_d = None, -1.0
    for _ in range(n_reject):
        x = sampler.draw()
        d = tree.stack.distances(x)
        dmin = float(d.min(initial=np.inf))
        if not tree.stack.inside(x).any():
            return x, False
        if dmin > best_d:
            best, best_d = x, dmin
    return best, True


def select_targets(tree: PolytopicTree, x_sample, k: int, min_sigma: float = 0.0) -> list[int]:
    """Nearest ``k`` nodes by closed-form distance, ties to the lower id.

    Every node is returned (still ranked) while the tree has fewer than
    ``4 k`` nodes.
    Nodes whose smallest singular value is below ``min_sigma`` are skipped
    (their halfspace form is ill conditioned); the root always qualifies.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = np.array([v.id for v in tree.nodes
                    if v.id == 0 or v.polytope.singular_values.min() >= min_sigma], dtype=int)
    d = tree.stack.distances(x_sample)[ids]
    order = np.lexsort((ids, d))
    keep = len(ids) if len(tree) < 4 * k else k
    return ids[order[:keep]].tolist()


def coverage_points(system: PWASystem, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples of the state set by rejection from its bounding box."""
    lo, hi = geo.bounding_box(system.state_box)
    out = np.empty((0, lo.size))
    while len(out) < n_samples:
        cand = rng.uniform(lo, hi, size=(max(n_samples, 16), lo.size))
        out = np.vstack([out, cand[system.state_box.contains_many(cand, 0.0)]])
    return out[:n_samples]


def coverage_estimate(tree: PolytopicTree, system: PWASystem, n_samples: int,
                      rng: np.random.Generator | None = None, points: np.ndarray | None = None) -> float:
    """Fraction of uniform state samples inside some node."""
    if points is None:
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        points = coverage_points(system, n_samples, rng or np.random.default_rng(0))
    if len(points) == 0:
        return 0.0
    return float(np.mean([tree.in_tree(x) for x in points]))


def _eta_max(system: PWASystem) -> np.ndarray:
    lo, hi = geo.bounding_box(system.state_box)
    return (hi - lo) / 2


def _solve(query: TrajectoryQuery, config: GrowthConfig):
    try:
        return solve_trajectory(query, config.milp, config.min_volume)
    except (Infeasible, VolumeRejected):
        if not config.rank_fallback or query.system.n < 2:
            raise
        return rank_fallback(query, config=config.milp)


def init_tree(system: PWASystem, config: GrowthConfig, rng: np.random.Generator | None = None) -> PolytopicTree:
    """Root the tree at the goal and attach one unanchored branch.

    Horizons are tried from ``T_max`` down to 1; the first feasible,
    sound trajectory is kept.
    """
    rng = rng or np.random.default_rng([config.seed, 2])
    tree = PolytopicTree(system, config.seed)
    tree.set_root()
    for T in range(config.T_max, 0, -1):
        query = TrajectoryQuery(system, T, [system.goal], None, config.objective, dynamics=config.dynamics)
        t0 = time.perf_counter()
        try:
            traj = _solve(query, config)
        except (Infeasible, VolumeRejected):
            tree.solve_log.append({"iteration": -1, "T": T, "outcome": "infeasible",
                                   "wall_time": time.perf_counter() - t0})
            continue
        tree.solve_log.append({"iteration": -1, "T": T, "outcome": "accepted", "wall_time": time.perf_counter() - t0})
        traj = _drop_thin(traj, config.min_sigma)
        if traj is None:
            continue
        rep = check_soundness(traj, system, [system.goal], rng, config.soundness_samples)
        if not rep.ok:
            continue
        ids = tree.add_branch(traj, 0, iteration=-1)
        tree.stats.append(_record(-1, "accepted", T, None, len(ids), len(tree), 0, traj, None))
        return tree
    raise NoInitialBranch(f"no unanchored trajectory reaches the goal for T <= {config.T_max}")


def _record(it, outcome, T, beta, added, n_nodes, target, traj, coverage, x_sample=None) -> dict:
    return {"iteration": it, "outcome": outcome, "accepted": outcome == "accepted", "T": T,
            "beta": None if beta is None else float(beta), "branch_size": added, "n_nodes": n_nodes,
            "target": target, "modes": None if traj is None else [int(i) for i in traj.modes],
            "coverage": coverage, "x_sample": None if x_sample is None else [float(v) for v in x_sample]}


def _drop_thin(traj: PolytopicTrajectory, min_sigma: float) -> PolytopicTrajectory | None:
    """Keep the steps after the last nearly singular set.

    The law on a node is evaluated at ``p = G_eps^-1 (x - xbar)``, which only
    recovers the template parameter when ``G`` is well conditioned.
    """
    thin = traj.thin_steps(min_sigma)
    if thin.size == 0:
        return traj
    start = int(thin[-1]) + 1
    return traj.suffix(start) if start < traj.T else None


def _novel(tree: PolytopicTree, traj: PolytopicTrajectory) -> bool:
    X0 = traj.polytope(0)
    pts = np.vstack([X0.xbar[None, :], geo.node_vertices(X0).points])
    return not all(tree.in_tree(x) for x in pts)


def grow(tree: PolytopicTree, config: GrowthConfig, rng: np.random.Generator | None = None,
         progress=None) -> list[dict]:
    """Run ``config.iterations`` sampling iterations on ``tree``.

    Each iteration samples a state outside the tree, a horizon and an
    anchor scale, solves an anchored trajectory into the nearest nodes and
    keeps it when it is thick, new and passes closed-loop sampling.
    """
    system = tree.system
    K = config.iterations
    rng = rng or np.random.default_rng([config.seed, 1])
    check_rng = np.random.default_rng([config.seed, 3])
    eval_pts = coverage_points(system, config.coverage_samples, np.random.default_rng([config.seed, 4]))
    sampler = StateSampler(system.state_box, rng)
    eta_max = _eta_max(system)
    records: list[dict] = []
    start = len([r for r in tree.stats if r["iteration"] >= 0])
    for k in range(K):
        it = start + k
        frac = k / (K - 1) if K > 1 else 1.0
        beta_mean = 0.5 + (config.beta_mean_final - 0.5) * frac
        x_sample, saturated = sample_outside(tree, sampler, config.n_reject)
        T = int(rng.integers(1, config.T_max + 1))
        beta = float(rng.uniform()) * 2 * beta_mean
        ids = select_targets(tree, x_sample, config.k, config.min_sigma)
        if len(tree) < 4 * config.k:
            ids.sort()  # small trees pass every node in insertion order
        targets = [tree.target_polytope(i) for i in ids]
        query = TrajectoryQuery(system, T, targets, NearPoint(x_sample, eta_max, beta), config.objective,
                                dynamics=config.dynamics)
        t0 = time.perf_counter()
        traj, outcome, target, added = None, "accepted", None, 0
        try:
            traj = _solve(query, config)
        except Infeasible:
            outcome = "infeasible"
        except VolumeRejected:
            outcome = "volume"
        wall = time.perf_counter() - t0
        if traj is not None:
            target = ids[traj.target]
            traj = _drop_thin(traj, config.min_sigma)
            if traj is None:
                outcome = "thin"
            elif not _novel(tree, traj):
                outcome = "novelty"
            else:
                rep = check_soundness(traj, system, targets, check_rng, config.soundness_samples)
                if not rep.ok:
                    outcome = "unsound"
                    log.warning("iteration %d: branch failed closed-loop sampling (%s)", it, rep)
        if outcome == "accepted":
            added = len(tree.add_branch(traj, target, iteration=it))
        coverage = None
        if config.coverage_every and ((k + 1) % config.coverage_every == 0 or k == K - 1):
            coverage = coverage_estimate(tree, system, 0, points=eval_pts)
        rec = _record(it, outcome, T, beta, added, len(tree), target, traj, coverage, x_sample)
        rec["saturated"] = saturated
        records.append(rec)
        tree.stats.append(rec)
        tree.solve_log.append({"iteration": it, "T": T, "outcome": outcome, "wall_time": wall})
        if progress is not None:
            progress(rec)
        if saturated:
            log.info("coverage saturated at iteration %d; stopping", it)
            break
    return records
