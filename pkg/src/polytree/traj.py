"""Polytopic trajectories: one MILP for a funnel of parallelotopes.

Step ``tau`` carries a set ``X_tau = xbar_tau + G_tau P`` and an affine law
``u = ubar_tau + theta_tau p`` sharing the template parameter ``p``. Mode
selectors pick the cell that must contain ``X_tau x U_tau``; the sets are
propagated by the selected affine dynamics, and the last set must land
inside one of the targets.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from . import geometry as geo
from . import milp
from .errors import DimensionMismatch, EmptyTargets, Infeasible, VolumeRejected
from .geometry import AHPolytope, HPolytope, TemplatePolytope
from .milp import MilpConfig, MilpModel
from .pwa import PWASystem

Target = Union[AHPolytope, HPolytope]
MIN_VOLUME = 1e-6


@dataclass(frozen=True)
class NearPoint:
    """Anchor ``|xbar_0 - x_sample| <= beta * eta_box`` componentwise."""

    x_sample: np.ndarray
    eta_box: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "x_sample", np.asarray(self.x_sample, dtype=float).ravel())
        object.__setattr__(self, "eta_box", np.broadcast_to(np.asarray(self.eta_box, dtype=float),
                                                            self.x_sample.shape).copy())
        if np.any(self.eta_box < 0) or not 0 <= self.beta:
            raise ValueError("eta_box and beta must be nonnegative")


@dataclass(frozen=True)
class ObjectiveConfig:
    """Weights of the volume surrogate.

    The objective maximizes ``w_tr tr(G_0) + w_1 sum(diag G_0) + w_inf
    min(diag G_0) + sum_tau w_tau tr(G_tau)``. ``w_tau=None`` means
    ``0.05 / T``.
    """

    w_tr: float = 1.0
    w_1: float = 0.1
    w_inf: float = 1.0
    w_tau: float | None = None
    d_min: float = 1e-3
    triangular: bool = True

    @classmethod
    def from_mapping(cls, data: dict | None) -> "ObjectiveConfig":
        data = dict(data or {})
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


@dataclass
class TrajectoryQuery:
    system: PWASystem
    T: int
    targets: Sequence[Target]
    anchor: NearPoint | None = None
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    template: TemplatePolytope | None = None
    dynamics: str = "big_m"
    column_mask: np.ndarray | None = None  # rank fallback: zero columns of G_0 where False
    pivots: tuple | None = None  # rank fallback: row pushed above d_min in each kept column

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"horizon must be a positive integer, got {self.T}")
        self.T = int(self.T)
        self.targets = list(self.targets)
        if not self.targets:
            raise EmptyTargets("at least one target is required")
        if self.template is None:
            self.template = TemplatePolytope.unit_cube(self.system.n)
        for Z in self.targets:
            if Z.dim != self.system.n:
                raise DimensionMismatch(f"target dimension {Z.dim} != state dimension {self.system.n}")
        if self.anchor is not None and self.anchor.x_sample.size != self.system.n:
            raise DimensionMismatch("anchor point has the wrong dimension")
        if self.dynamics not in ("big_m", "split"):
            raise ValueError(f"unknown dynamics encoding {self.dynamics!r}")


@dataclass
class PolytopicTrajectory:
    xbar: np.ndarray      # (T+1, n)
    G: np.ndarray         # (T+1, n, n_p)
    ubar: np.ndarray      # (T, m)
    theta: np.ndarray     # (T, m, n_p)
    modes: np.ndarray     # (T,)
    target: int
    objective: float
    stats: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.modes)

    def polytope(self, tau: int) -> AHPolytope:
        return AHPolytope(self.xbar[tau], self.G[tau])

    def suffix(self, start: int) -> "PolytopicTrajectory":
        """Steps ``start..T`` as a shorter trajectory with the same target."""
        if not 0 <= start < self.T:
            raise ValueError(f"start must lie in [0, {self.T})")
        return PolytopicTrajectory(self.xbar[start:], self.G[start:], self.ubar[start:], self.theta[start:],
                                   self.modes[start:], self.target, self.objective, dict(self.stats))

    def thin_steps(self, min_sigma: float) -> np.ndarray:
        """Steps ``tau < T`` whose set has a singular value below ``min_sigma``."""
        sig = np.array([np.linalg.svd(self.G[t], compute_uv=False).min() for t in range(self.T)])
        return np.flatnonzero(sig < min_sigma)

    def volume_proxy(self) -> float:
        """``prod |diag G_0|``; the true volume for triangular ``G_0`` up to ``2^n``."""
        return float(np.prod(np.abs(np.diag(self.G[0]))))

    def evolution_residual(self, system: PWASystem) -> float:
        worst = 0.0
        for tau, i in enumerate(self.modes):
            md = system.modes[i]
            rx = md.A @ self.xbar[tau] + md.B @ self.ubar[tau] + md.c - self.xbar[tau + 1]
            rG = md.A @ self.G[tau] + md.B @ self.theta[tau] - self.G[tau + 1]
            worst = max(worst, np.abs(rx).max(initial=0.0), np.abs(rG).max(initial=0.0))
        return float(worst)

    def to_dict(self) -> dict:
        return {"xbar": self.xbar.tolist(), "G": self.G.tolist(), "ubar": self.ubar.tolist(),
                "theta": self.theta.tolist(), "modes": [int(i) for i in self.modes],
                "target": int(self.target), "objective": float(self.objective)}

    @classmethod
    def from_dict(cls, data: dict) -> "PolytopicTrajectory":
        return cls(np.asarray(data["xbar"], float), np.asarray(data["G"], float),
                   np.asarray(data["ubar"], float), np.asarray(data["theta"], float),
                   np.asarray(data["modes"], int), int(data["target"]), float(data["objective"]))


@dataclass
class TrajectoryModel:
    """A built MILP plus handles to its decision variables."""

    model: MilpModel
    query: TrajectoryQuery
    xbar: list
    G: list
    ubar: list
    theta: list
    deltas: list
    cells: list
    terminal: geo.ContainmentCertificate
    diag_min: milp.LinExpr | None = None


def target_hpolytope(Z: Target) -> HPolytope:
    return Z if isinstance(Z, HPolytope) else Z.to_hpolytope()


def _bounds(system: PWASystem):
    xlo, xhi = geo.bounding_box(system.state_box)
    ulo, uhi = geo.bounding_box(system.input_box)
    return xlo, xhi, ulo, uhi


def build_model(query: TrajectoryQuery) -> TrajectoryModel:
    """Assemble the trajectory MILP (objective included)."""
    sys_ = query.system
    n, m, T = sys_.n, sys_.m, query.T
    P = query.template.poly
    n_p = query.template.dim
    xlo, xhi, ulo, uhi = _bounds(sys_)
    gw = (xhi - xlo) / 2  # |G_ij| <= half-width of row i for a set inside the state box
    tw = (uhi - ulo) / 2
    Gb = np.repeat(gw[:, None], n_p, axis=1)
    Tb = np.repeat(tw[:, None], n_p, axis=1)

    model = MilpModel(f"traj_T{T}")
    xbar = [model.add_variables(n, xlo, xhi, f"xbar{t}") for t in range(T + 1)]
    G = [model.add_variables((n, n_p), -Gb, Gb, f"G{t}") for t in range(T + 1)]
    ubar = [model.add_variables(m, ulo, uhi, f"ubar{t}") for t in range(T)]
    theta = [model.add_variables((m, n_p), -Tb, Tb, f"theta{t}") for t in range(T)]
    deltas, cells = [], []
    cell_polys = [md.cell for md in sys_.modes]

    for t in range(T):
        d = model.add_binaries(sys_.n_modes, f"delta{t}")
        cert = geo.encode_containment(model, milp.vstack([G[t], theta[t]]), milp.concat([xbar[t], ubar[t]]),
                                      P, cell_polys, binaries=d, name=f"cell{t}")
        model.add_sos1(d)
        deltas.append(d)
        cells.append(cert)
        if query.dynamics == "split":
            # the split of (Q, q) across cells vanishes off the selected one
            nx = sum(md.A @ q[:n] + md.B @ q[n:] + d[i] * md.c for i, (md, q) in enumerate(zip(sys_.modes, cert.qs)))
            nG = sum(md.A @ Q[:n] + md.B @ Q[n:] for md, Q in zip(sys_.modes, cert.Qs))
            model.add_constraint(xbar[t + 1] - nx, "==", 0.0, name=f"dyn_x{t}")
            model.add_constraint(G[t + 1] - nG, "==", 0.0, name=f"dyn_G{t}")
            continue
        for i, md in enumerate(sys_.modes):
            rx = md.A @ xbar[t] + md.B @ ubar[t] + md.c - xbar[t + 1]
            rG = (md.A @ G[t] + md.B @ theta[t] - G[t + 1]).ravel()
            if sys_.n_modes == 1:
                model.add_constraint(rx, "==", 0.0, name=f"dyn_x{t}")
                model.add_constraint(rG, "==", 0.0, name=f"dyn_G{t}")
                continue
            for sign in (1.0, -1.0):
                model.add_big_m(sign * rx, d[i], group=f"dyn_x{t}_{i}")
                model.add_big_m(sign * rG, d[i], group=f"dyn_G{t}_{i}")

    targets = [target_hpolytope(Z) for Z in query.targets]
    terminal = geo.encode_containment(model, G[T], xbar[T], P, targets, name="terminal")

    if query.anchor is not None:
        a = query.anchor
        slack = a.beta * a.eta_box
        model.add_constraint(xbar[0], "<=", a.x_sample + slack, name="anchor_hi")
        model.add_constraint(xbar[0], ">=", a.x_sample - slack, name="anchor_lo")

    tm = TrajectoryModel(model, query, xbar, G, ubar, theta, deltas, cells, terminal)
    volume_objective(tm, query.objective)
    return tm


def volume_objective(tm: TrajectoryModel, config: ObjectiveConfig) -> milp.LinExpr:
    """Structure ``G_0`` and set the volume surrogate as the objective.

    ``G_0`` is made lower triangular with diagonal at least ``d_min`` (a
    symmetric template lets every column be sign-flipped, so this loses no
    generality for the diagonal). The minimum diagonal entry enters through
    one epigraph variable.
    """
    model, G, T = tm.model, tm.G, tm.query.T
    G0 = G[0]
    n, n_p = G0.shape
    mask = tm.query.column_mask
    w_tau = 0.05 / T if config.w_tau is None else config.w_tau
    obj = 0.0
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        for j in np.flatnonzero(~keep):
            model.add_constraint(G0[:, j], "==", 0.0, name=f"rank_zero{j}")
        pivots = tm.query.pivots or ()
        for j, r in zip(np.flatnonzero(keep), pivots):
            model.add_constraint(G0[r, j], ">=", config.d_min, name=f"pivot{j}")
            obj = obj + G0[r, j]
        obj = config.w_tr * obj
    elif config.triangular and n == n_p:
        upper = [(i, j) for i in range(n) for j in range(i + 1, n)]
        for i, j in upper:
            model.add_constraint(G0[i, j], "==", 0.0, name=f"tri{i}_{j}")
        diag = G0.diagonal()
        model.add_constraint(diag, ">=", config.d_min, name="diag_min")
        s = model.add_variable(0.0, milp.INF, "diag_epi")
        model.add_constraint(diag - s, ">=", 0.0, name="diag_epi")
        tm.diag_min = s
        obj = config.w_tr * diag.sum() + config.w_1 * diag.sum() + config.w_inf * s
    else:
        obj = config.w_tr * G0.diagonal().sum()
    if w_tau:
        for t in range(1, T + 1):
            obj = obj + w_tau * G[t].trace()
    obj = -obj if isinstance(obj, milp.LinExpr) else model.constant(-obj)
    model.set_objective(obj)
    return obj


def _extract(tm: TrajectoryModel, sol: milp.MilpSolution) -> PolytopicTrajectory:
    T = tm.query.T
    xbar = np.array([sol.value(v) for v in tm.xbar])
    G = np.array([sol.value(v) for v in tm.G])
    ubar = np.array([sol.value(v) for v in tm.ubar]).reshape(T, -1)
    theta = np.array([sol.value(v) for v in tm.theta]).reshape(T, tm.query.system.m, -1)
    modes = np.array([int(np.argmax(sol.value(d))) for d in tm.deltas], dtype=int)
    stats = dict(sol.stats)
    stats["status"] = sol.status.value
    stats["gap"] = sol.gap
    stats.pop("bound_history", None)
    return PolytopicTrajectory(xbar, G, ubar, theta, modes, tm.terminal.selected(sol), sol.objective, stats)


def solve_query(query: TrajectoryQuery, config: MilpConfig | None = None) -> PolytopicTrajectory:
    """Build and solve once; raise ``Infeasible`` when no trajectory is found."""
    tm = build_model(query)
    sol = milp.solve_milp(tm.model, config)
    if not sol.has_solution:
        raise Infeasible(f"trajectory MILP (T={query.T}): {sol.status.value}")
    return _extract(tm, sol)


def solve_trajectory(query: TrajectoryQuery, config: MilpConfig | None = None,
                     min_volume: float = MIN_VOLUME, retry: bool = True) -> PolytopicTrajectory:
    """Solve the query and apply the volume acceptance test.

    A trajectory whose ``prod |diag G_0|`` is below ``min_volume`` is
    re-solved once with the min-diagonal weight boosted tenfold; if it is
    still too thin, ``VolumeRejected`` is raised.
    """
    traj = solve_query(query, config)
    if traj.volume_proxy() >= min_volume * (1 - 1e-9):
        return traj
    if retry:
        obj = query.objective
        boosted = replace(query, objective=replace(obj, w_inf=10 * obj.w_inf))
        traj = solve_query(boosted, config)
        if traj.volume_proxy() >= min_volume * (1 - 1e-9):
            return traj
    raise VolumeRejected(f"volume proxy {traj.volume_proxy():.3g} < {min_volume:g}")


def rank_fallback(query: TrajectoryQuery, q: int | None = None,
                  config: MilpConfig | None = None) -> PolytopicTrajectory:
    """Search for a lower-rank initial set ``G_0 = G^f S_q``.

    ``S_q`` keeps the first ``q`` template directions (an axis-aligned
    selector), so ``G_0`` has ``n_p - q`` zero columns and ``G^f`` is free.
    Each kept column gets a pivot row whose entry is pushed above
    ``d_min``; every pivot assignment is tried and the best objective wins.
    Ranks are tried from ``q`` (default ``n - 1``) down to 1.
    """
    n = query.system.n
    n_p = query.template.dim
    q0 = n - 1 if q is None else q
    if not 1 <= q0 < n:
        raise ValueError(f"rank must satisfy 1 <= q < n = {n}, got {q0}")
    for rank in range(q0, 0, -1):
        mask = np.zeros(n_p, dtype=bool)
        mask[:rank] = True
        best = None
        for pivots in itertools.permutations(range(n), rank):
            try:
                traj = solve_query(replace(query, column_mask=mask, pivots=pivots), config)
            except Infeasible:
                continue
            if best is None or traj.objective < best.objective:
                best = traj
        if best is not None:
            best.stats["rank"] = rank
            return best
    raise Infeasible("no trajectory of any rank >= 1")


# ---------------------------------------------------------------------------
# Sampled verification
# ---------------------------------------------------------------------------


@dataclass
class SoundnessReport:
    n_samples: int
    cell_violations: int
    flow_violations: int
    worst_cell_margin: float
    worst_flow_distance: float

    @property
    def ok(self) -> bool:
        return self.cell_violations == 0 and self.flow_violations == 0


def _outside_amount(X: np.ndarray, Z: Target, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-row membership in ``Z`` and an l_inf-style distance to it."""
    if isinstance(Z, HPolytope):
        viol = np.max(X @ Z.H.T - Z.h, axis=1)
        return viol <= tol, np.maximum(viol, 0.0)
    Pm = (X - Z.xbar) @ Z.G_eps_inv().T
    inside = np.max(np.abs(Pm), axis=1) <= 1.0 + tol
    dist = np.max(np.abs((Pm - np.clip(Pm, -1.0, 1.0)) @ Z.G_eps().T), axis=1)
    return inside, dist


def check_soundness(traj: PolytopicTrajectory, system: PWASystem, targets: Sequence[Target],
                    rng: np.random.Generator, n_samples: int = 1000, tol: float = 1e-6) -> SoundnessReport:
    """Closed-loop sampling check of a solved trajectory.

    For ``n_samples`` template points per step, the state and input given
    by the stored law must lie in the step's cell, and the successor must
    lie in the next set (or in the certified target after the last step).
    """
    cell_bad = flow_bad = 0
    worst_margin, worst_flow = np.inf, 0.0
    n_p = traj.G.shape[2]
    for tau in range(traj.T):
        md = system.modes[traj.modes[tau]]
        Pts = rng.uniform(-1.0, 1.0, size=(n_samples, n_p))
        X = traj.xbar[tau] + Pts @ traj.G[tau].T
        U = traj.ubar[tau] + Pts @ traj.theta[tau].T
        margins = np.min(md.cell.h - np.hstack([X, U]) @ md.cell.H.T, axis=1)
        cell_bad += int(np.sum(margins < -tol))
        worst_margin = min(worst_margin, float(margins.min()))
        Xn = X @ md.A.T + U @ md.B.T + md.c
        nxt = traj.polytope(tau + 1) if tau + 1 < traj.T else targets[traj.target]
        inside, dist = _outside_amount(Xn, nxt, tol)
        flow_bad += int(np.sum(~inside))
        worst_flow = max(worst_flow, float(dist.max(initial=0.0)))
    return SoundnessReport(n_samples, cell_bad, flow_bad, worst_margin, worst_flow)
