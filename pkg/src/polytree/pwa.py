"""Discrete-time piecewise-affine systems.

A system is a list of modes. Mode ``i`` applies ``x+ = A_i x + B_i u + c_i``
on its cell, a polytope over the joint ``(x, u)`` space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import geometry as geo
from .errors import DimensionMismatch, OutOfPartition
from .geometry import CONSTRAINT_TOL, HPolytope


@dataclass(frozen=True)
class Constant:
    w: float

    def __call__(self, x, u) -> float:
        return float(self.w)

    def to_dict(self) -> dict:
        return {"type": "constant", "w": float(self.w)}


@dataclass(frozen=True)
class Affine:
    a_x: np.ndarray
    a_u: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "a_x", np.atleast_1d(np.asarray(self.a_x, dtype=float)))
        object.__setattr__(self, "a_u", np.atleast_1d(np.asarray(self.a_u, dtype=float)))

    def __call__(self, x, u) -> float:
        return float(self.a_x @ np.asarray(x, dtype=float) + self.a_u @ np.asarray(u, dtype=float) + self.b)

    def to_dict(self) -> dict:
        return {"type": "affine", "a_x": self.a_x.tolist(), "a_u": self.a_u.tolist(), "b": float(self.b)}


StageCost = Union[Constant, Affine]


def cost_from_dict(data) -> StageCost:
    if isinstance(data, (int, float)):
        return Constant(float(data))
    kind = data.get("type", "constant")
    if kind == "constant":
        return Constant(float(data["w"]))
    if kind == "affine":
        return Affine(data["a_x"], data["a_u"], float(data.get("b", 0.0)))
    raise ValueError(f"unknown stage cost type {kind!r}")


@dataclass(frozen=True)
class Mode:
    """Affine dynamics valid on ``cell`` (a polytope in ``(x, u)`` space)."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    cell: HPolytope
    stage_cost: StageCost = field(default_factory=lambda: Constant(1.0))
    name: str = ""

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(n, -1)
        c = np.asarray(self.c, dtype=float).ravel()
        if A.shape != (n, n) or c.size != n:
            raise DimensionMismatch(f"mode {self.name!r}: A {A.shape}, c {c.shape}")
        if self.cell.dim != n + B.shape[1]:
            raise DimensionMismatch(f"mode {self.name!r}: cell dim {self.cell.dim} != n + m = {n + B.shape[1]}")
        if isinstance(self.stage_cost, Affine) and (self.stage_cost.a_x.size != n
                                                    or self.stage_cost.a_u.size != B.shape[1]):
            raise DimensionMismatch(f"mode {self.name!r}: affine cost has wrong size")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def apply(self, x, u) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float) + self.B @ np.asarray(u, dtype=float) + self.c

    def to_dict(self) -> dict:
        return {"name": self.name, "A": self.A.tolist(), "B": self.B.tolist(), "c": self.c.tolist(),
                "cell": self.cell.to_dict(), "cost": self.stage_cost.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "Mode":
        return cls(data["A"], data["B"], data["c"], HPolytope.from_dict(data["cell"]),
                   cost_from_dict(data.get("cost", 1.0)), data.get("name", ""))


@dataclass(frozen=True)
class PWASystem:
    modes: tuple
    state_box: HPolytope
    input_box: HPolytope
    goal: HPolytope
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        if not self.modes:
            raise ValueError("system needs at least one mode")
        n, m = self.modes[0].n, self.modes[0].m
        for mode in self.modes:
            if (mode.n, mode.m) != (n, m):
                raise DimensionMismatch("all modes must share state and input dimensions")
        if self.state_box.dim != n or self.goal.dim != n or self.input_box.dim != m:
            raise DimensionMismatch("state_box, goal and input_box dimensions disagree with the modes")

    @property
    def n(self) -> int:
        return self.modes[0].n

    @property
    def m(self) -> int:
        return self.modes[0].m

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def dt(self) -> float | None:
        return self.meta.get("dt")

    def mode_names(self) -> list[str]:
        return [md.name or f"mode{i}" for i, md in enumerate(self.modes)]

    def to_dict(self) -> dict:
        out = {"name": self.name, "n": self.n, "m": self.m,
               "modes": [md.to_dict() for md in self.modes],
               "state_box": self.state_box.to_dict(), "input_box": self.input_box.to_dict(),
               "goal": self.goal.to_dict()}
        out.update({k: v for k, v in self.meta.items() if k not in out})
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PWASystem":
        modes = [Mode.from_dict(d) for d in data["modes"]]
        reserved = {"name", "n", "m", "modes", "state_box", "input_box", "goal"}
        meta = {k: v for k, v in data.items() if k not in reserved}
        sys_ = cls(modes, HPolytope.from_dict(data["state_box"]), HPolytope.from_dict(data["input_box"]),
                   HPolytope.from_dict(data["goal"]), data.get("name", ""), meta)
        if "n" in data and int(data["n"]) != sys_.n or "m" in data and int(data["m"]) != sys_.m:
            raise DimensionMismatch("declared n/m disagree with the mode matrices")
        return sys_

    @classmethod
    def load(cls, path: str | Path) -> "PWASystem":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def validate(self, rng: np.random.Generator | None = None, n_samples: int = 2000) -> list[str]:
        """Return a list of problems: goal outside the state box, cells sticking out."""
        problems = []
        k = self.goal.dim
        if not geo.check_containment(np.eye(k), np.zeros(k), self.goal, self.state_box):
            problems.append("goal is not contained in state_box")
        joint = self.state_box.product(self.input_box)
        rng = rng or np.random.default_rng(0)
        for i, mode in enumerate(self.modes):
            try:
                pts = geo.hit_and_run(mode.cell, rng, n_samples, burn_in=20)
            except Exception:  # empty or flat cell
                continue
            if not joint.contains_many(pts, 1e-6).all():
                problems.append(f"cell of mode {i} leaves state_box x input_box")
        return problems


def mode_of(system: PWASystem, x, u, tol: float = CONSTRAINT_TOL) -> int:
    """Lowest index whose cell contains ``(x, u)``."""
    z = np.concatenate([np.atleast_1d(np.asarray(x, dtype=float)), np.atleast_1d(np.asarray(u, dtype=float))])
    if z.size != system.n + system.m:
        raise DimensionMismatch(f"expected {system.n}+{system.m} entries, got {z.size}")
    for i, mode in enumerate(system.modes):
        if mode.cell.contains(z, tol):
            return i
    raise OutOfPartition(f"(x, u) = {z.tolist()} lies in no cell")


def step(system: PWASystem, x, u) -> np.ndarray:
    """One step of the dynamics in the resolved mode."""
    return system.modes[mode_of(system, x, u)].apply(x, u)


def stage_cost_eval(mode: Mode, x, u) -> float:
    return mode.stage_cost(x, u)


@dataclass(frozen=True)
class PartitionReport:
    n_samples: int
    coverage: float
    overlap: float
    uncovered: np.ndarray


def validate_partition(system: PWASystem, n_samples: int, rng: np.random.Generator | None = None,
                       margin: float = 1e-6) -> PartitionReport:
    """Sample ``state_box x input_box`` uniformly and measure cell coverage.

    ``overlap`` is the fraction of samples that lie strictly inside (by
    more than ``margin``) two or more cells.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = rng or np.random.default_rng(0)
    lo, hi = geo.bounding_box(system.state_box.product(system.input_box))
    joint = system.state_box.product(system.input_box)
    Z = np.empty((0, lo.size))
    while len(Z) < n_samples:  # rejection sampling from the bounding box
        cand = rng.uniform(lo, hi, size=(max(n_samples, 16), lo.size))
        Z = np.vstack([Z, cand[joint.contains_many(cand, 0.0)]])
    Z = Z[:n_samples]
    inside = np.zeros(n_samples, dtype=int)
    strict = np.zeros(n_samples, dtype=int)
    for mode in system.modes:
        slack = mode.cell.h - Z @ mode.cell.H.T
        inside += np.all(slack >= -CONSTRAINT_TOL, axis=1)
        strict += np.all(slack > margin, axis=1)
    return PartitionReport(n_samples, float(np.mean(inside >= 1)), float(np.mean(strict >= 2)), Z[inside == 0])
