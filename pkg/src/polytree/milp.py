"""Linear and mixed-integer linear model construction and solution.

Models are built from :class:`LinExpr` objects, which are arrays (scalar,
vector or matrix shaped) of affine expressions in the model variables.
Constant numpy matrices multiply expressions from either side, so
constraints such as ``Lam @ H_y == H_z @ Q`` read like the math.

Solving goes through two routes:

* :func:`solve_lp` - the LP relaxation (binaries relaxed to ``[0, 1]`` or
  fixed), backed by the HiGHS simplex shipped with scipy.
* :func:`solve_milp` - best-bound branch and bound over :func:`solve_lp`
  relaxations (``backend="bnb"``), or the HiGHS MIP solver
  (``backend="highs"``) for larger instances.

Every call into an optimization solver increments a module counter
(:func:`solver_calls`) so callers can assert that a code path is
solver-free.
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, LinearConstraint, linprog
from scipy.optimize import milp as _scipy_milp

from .errors import ModelFrozen, NumericalFailure, UndeclaredVariable, UnsupportedFormat

INF = math.inf

_SOLVER_CALLS = 0


def solver_calls() -> int:
    """Number of optimization-solver invocations made so far in this process."""
    return _SOLVER_CALLS


def _tick() -> None:
    global _SOLVER_CALLS
    _SOLVER_CALLS += 1


def linprog_counted(*args, **kwargs):
    """``scipy.optimize.linprog`` with the solver counter incremented."""
    _tick()
    return linprog(*args, **kwargs)


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------


def _pad(coef: sp.csr_matrix, width: int) -> sp.csr_matrix:
    if coef.shape[1] == width:
        return coef
    return sp.csr_matrix((coef.data, coef.indices, coef.indptr), shape=(coef.shape[0], width))


class LinExpr:
    """Array of affine expressions ``coef @ x + const`` over one model's variables.

    Entries are stored flattened in row-major order; ``shape`` is ``()``,
    ``(k,)`` or ``(r, c)``.
    """

    __array_ufunc__ = None  # make ndarray defer to our reflected operators

    def __init__(self, model: "MilpModel", coef: sp.csr_matrix, const: np.ndarray, shape: tuple):
        self.model = model
        self.coef = coef.tocsr()
        self.const = np.asarray(const, dtype=float).ravel()
        self.shape = tuple(shape)
        self.index: np.ndarray | None = None  # set for pure variable blocks

    # -- helpers ---------------------------------------------------------
    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=int))

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def _width(self) -> int:
        return self.model.n_vars

    def _lift(self, other) -> "LinExpr":
        if isinstance(other, LinExpr):
            if other.model is not self.model:
                raise UndeclaredVariable("expression belongs to a different model")
            return other
        arr = np.asarray(other, dtype=float)
        arr = np.broadcast_to(arr, self.shape) if arr.shape != self.shape else arr
        return self.model.constant(arr)

    def _combine(self, other: "LinExpr", sign: float) -> "LinExpr":
        if other.shape != self.shape:
            if other.size == 1:
                other = other._broadcast(self.shape)
            elif self.size == 1:
                return self._broadcast(other.shape)._combine(other, sign)
            else:
                raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        w = self._width()
        coef = _pad(self.coef, w) + sign * _pad(other.coef, w)
        return LinExpr(self.model, coef, self.const + sign * other.const, self.shape)

    def _broadcast(self, shape) -> "LinExpr":
        rows = np.broadcast_to(np.arange(self.size).reshape(self.shape), shape).ravel()
        return LinExpr(self.model, self.coef[rows], self.const[rows], tuple(shape))

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return self._combine(self._lift(other), 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(self._lift(other), -1.0)

    def __rsub__(self, other):
        return self._lift(other)._combine(self, -1.0)

    def __neg__(self):
        return LinExpr(self.model, -self.coef, -self.const, self.shape)

    def __mul__(self, other):
        if isinstance(other, LinExpr):
            raise TypeError("product of two expressions is not linear")
        arr = np.asarray(other, dtype=float)
        if arr.ndim == 0:
            return LinExpr(self.model, self.coef * float(arr), self.const * float(arr), self.shape)
        shape = np.broadcast_shapes(self.shape, arr.shape)
        base = self._broadcast(shape) if shape != self.shape else self
        arr = np.broadcast_to(arr, shape).ravel()
        return LinExpr(self.model, sp.diags(arr) @ base.coef, base.const * arr, shape)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * (1.0 / np.asarray(other, dtype=float))

    def __matmul__(self, other):
        if isinstance(other, LinExpr):
            raise TypeError("product of two expressions is not linear")
        K = np.asarray(other, dtype=float)
        if self.ndim == 1:
            out = (self.reshape((1, self.shape[0])) @ K)
            return out.reshape(out.shape[1:]) if K.ndim == 2 else out.reshape(())
        r, c = self.shape
        if K.ndim == 1:
            return (self @ K.reshape(c, 1)).reshape((r,))
        q = K.shape[1]
        T = sp.kron(sp.identity(r, format="csr"), sp.csr_matrix(K.T), format="csr")
        const = (self.const.reshape(r, c) @ K).ravel()
        return LinExpr(self.model, T @ self.coef, const, (r, q))

    def __rmatmul__(self, other):
        K = np.asarray(other, dtype=float)
        if self.ndim == 1:
            if K.ndim == 1:
                return (self.reshape((self.shape[0], 1)).__rmatmul__(K.reshape(1, -1))).reshape(())
            return LinExpr(self.model, sp.csr_matrix(K) @ self.coef, K @ self.const, (K.shape[0],))
        r, c = self.shape
        if K.ndim == 1:
            return (self.__rmatmul__(K.reshape(1, r))).reshape((c,))
        T = sp.kron(sp.csr_matrix(K), sp.identity(c, format="csr"), format="csr")
        const = (K @ self.const.reshape(r, c)).ravel()
        return LinExpr(self.model, T @ self.coef, const, (K.shape[0], c))

    # -- shape manipulation ----------------------------------------------
    def __getitem__(self, key):
        idx = np.arange(self.size).reshape(self.shape)[key]
        idx = np.asarray(idx)
        flat = idx.ravel()
        out = LinExpr(self.model, self.coef[flat], self.const[flat], idx.shape)
        if self.index is not None:
            out.index = np.asarray(self.index).ravel()[flat].reshape(idx.shape)
        return out

    def reshape(self, shape) -> "LinExpr":
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        if int(np.prod(shape, dtype=int)) != self.size:
            raise ValueError("cannot reshape")
        out = LinExpr(self.model, self.coef, self.const, shape)
        if self.index is not None:
            out.index = np.asarray(self.index).reshape(shape)
        return out

    def ravel(self) -> "LinExpr":
        return self.reshape((self.size,))

    @property
    def T(self) -> "LinExpr":
        if self.ndim < 2:
            return self
        idx = np.arange(self.size).reshape(self.shape).T
        return LinExpr(self.model, self.coef[idx.ravel()], self.const[idx.ravel()], idx.shape)

    def sum(self) -> "LinExpr":
        w = self._width()
        coef = sp.csr_matrix(np.ones((1, self.size))) @ _pad(self.coef, w)
        return LinExpr(self.model, coef, [self.const.sum()], ())

    def diagonal(self) -> "LinExpr":
        k = min(self.shape)
        return self[np.arange(k), np.arange(k)]

    def trace(self) -> "LinExpr":
        return self.diagonal().sum()

    def __repr__(self) -> str:
        return f"LinExpr(shape={self.shape}, nnz={self.coef.nnz})"


def _as_expr(model: "MilpModel", item) -> LinExpr:
    if isinstance(item, LinExpr):
        return item
    return model.constant(np.asarray(item, dtype=float))


def vstack(items: Sequence, model: "MilpModel | None" = None) -> LinExpr:
    """Row-stack 2-D expressions and constant matrices."""
    model = model or next(i.model for i in items if isinstance(i, LinExpr))
    exprs = [_as_expr(model, i) for i in items]
    exprs = [e.reshape((1, e.size)) if e.ndim == 1 else e for e in exprs]
    cols = {e.shape[1] for e in exprs}
    if len(cols) != 1:
        raise ValueError("vstack column mismatch")
    w = model.n_vars
    coef = sp.vstack([_pad(e.coef, w) for e in exprs], format="csr")
    const = np.concatenate([e.const for e in exprs])
    return LinExpr(model, coef, const, (sum(e.shape[0] for e in exprs), cols.pop()))


def concat(items: Sequence, model: "MilpModel | None" = None) -> LinExpr:
    """Concatenate vector expressions (and constant vectors)."""
    model = model or next(i.model for i in items if isinstance(i, LinExpr))
    exprs = [_as_expr(model, i).ravel() for i in items]
    w = model.n_vars
    coef = sp.vstack([_pad(e.coef, w) for e in exprs], format="csr")
    const = np.concatenate([e.const for e in exprs])
    return LinExpr(model, coef, const, (const.size,))


def hstack(items: Sequence, model: "MilpModel | None" = None) -> LinExpr:
    model = model or next(i.model for i in items if isinstance(i, LinExpr))
    return vstack([_as_expr(model, i).T for i in items], model).T


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class Status(str, Enum):
    OPTIMAL = "Optimal"
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    GAP_LIMIT = "GapLimit"
    NODE_LIMIT = "NodeLimit"
    TIME_LIMIT = "TimeLimit"


@dataclass(frozen=True)
class ConstraintHandle:
    start: int
    stop: int
    name: str | None = None

    def __len__(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class BigMRecord:
    group: str | None
    rows: ConstraintHandle
    M: np.ndarray
    binary: int
    clamped: bool


@dataclass
class CompiledModel:
    c: np.ndarray
    c0: float
    A: sp.csr_matrix
    row_lo: np.ndarray
    row_hi: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    integrality: np.ndarray
    A_ub: sp.csr_matrix | None = None
    b_ub: np.ndarray | None = None
    A_eq: sp.csr_matrix | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        lo_fin = np.isfinite(self.row_lo)
        hi_fin = np.isfinite(self.row_hi)
        eq = lo_fin & hi_fin & (self.row_lo == self.row_hi)
        up = hi_fin & ~eq
        low = lo_fin & ~eq
        blocks, rhs = [], []
        if up.any():
            blocks.append(self.A[np.flatnonzero(up)])
            rhs.append(self.row_hi[up])
        if low.any():
            blocks.append(-self.A[np.flatnonzero(low)])
            rhs.append(-self.row_lo[low])
        if blocks:
            self.A_ub = sp.vstack(blocks, format="csr")
            self.b_ub = np.concatenate(rhs)
        if eq.any():
            self.A_eq = self.A[np.flatnonzero(eq)]
            self.b_eq = self.row_lo[eq]


@dataclass
class MilpConfig:
    """Solver limits. Keys mirror the ``milp.*`` config-file entries."""

    gap_tol: float = 1e-6
    node_limit: int = 100_000
    time_limit_s: float | None = None
    big_m_max: float = 1e5
    backend: str = "bnb"
    polish: bool = True

    @classmethod
    def from_mapping(cls, data: dict[str, Any] | None) -> "MilpConfig":
        data = dict(data or {})
        known = {f: data[f] for f in cls.__dataclass_fields__ if f in data}
        return cls(**known)


class MilpModel:
    """Build-then-solve container for a (mixed-integer) linear program.

    Objective is always minimized.
    """

    BIG_M_MIN = 10.0
    BIG_M_MAX = 1e5
    BIG_M_DEFAULT = 1e4

    def __init__(self, name: str = "model", big_m_max: float | None = None):
        self.name = name
        self.big_m_max = self.BIG_M_MAX if big_m_max is None else float(big_m_max)
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._binary: list[bool] = []
        self._names: list[str] = []
        self._blocks: list[tuple[sp.csr_matrix, np.ndarray, np.ndarray]] = []
        self._n_rows = 0
        self._row_names: list[tuple[int, int, str | None]] = []
        self.objective: LinExpr | None = None
        self.big_m: list[BigMRecord] = []
        self.sos1: list[np.ndarray] = []
        self.frozen = False
        self._compiled: CompiledModel | None = None

    # -- sizes -----------------------------------------------------------
    @property
    def n_vars(self) -> int:
        return len(self._lb)

    @property
    def n_constraints(self) -> int:
        return self._n_rows

    @property
    def n_binaries(self) -> int:
        return int(sum(self._binary))

    @property
    def binary_indices(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self._binary, dtype=bool))

    def _check_open(self) -> None:
        if self.frozen:
            raise ModelFrozen(f"model {self.name!r} was already solved")

    # -- variables -------------------------------------------------------
    def constant(self, value) -> LinExpr:
        arr = np.asarray(value, dtype=float)
        coef = sp.csr_matrix((arr.size, self.n_vars))
        return LinExpr(self, coef, arr.ravel(), arr.shape)

    def add_variables(self, shape=(), lb=-INF, ub=INF, name: str | None = None,
                      binary: bool = False) -> LinExpr:
        self._check_open()
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        k = int(np.prod(shape, dtype=int))
        lb = np.broadcast_to(np.asarray(lb, dtype=float), shape).ravel()
        ub = np.broadcast_to(np.asarray(ub, dtype=float), shape).ravel()
        if np.any(lb > ub):
            raise ValueError("variable lower bound exceeds upper bound")
        start = self.n_vars
        self._lb.extend(lb.tolist())
        self._ub.extend(ub.tolist())
        self._binary.extend([binary] * k)
        base = name or ("b" if binary else "x")
        if k == 1 and shape == ():
            self._names.append(f"{base}")
        else:
            self._names.extend(f"{base}{list(np.unravel_index(j, shape))}" for j in range(k))
        idx = np.arange(start, start + k)
        coef = sp.csr_matrix((np.ones(k), (np.arange(k), idx)), shape=(k, self.n_vars))
        expr = LinExpr(self, coef, np.zeros(k), shape)
        expr.index = idx.reshape(shape)
        self._compiled = None
        return expr

    def add_variable(self, lb=-INF, ub=INF, name: str | None = None) -> LinExpr:
        return self.add_variables((), lb, ub, name)

    def add_binaries(self, shape=(), name: str | None = None) -> LinExpr:
        return self.add_variables(shape, 0.0, 1.0, name, binary=True)

    def add_binary(self, name: str | None = None) -> LinExpr:
        return self.add_binaries((), name)

    def bounds(self, var: LinExpr) -> tuple[np.ndarray, np.ndarray]:
        if var.index is None:
            raise ValueError("bounds() needs a variable block, not a general expression")
        idx = np.asarray(var.index).ravel()
        return np.asarray(self._lb)[idx].reshape(var.shape), np.asarray(self._ub)[idx].reshape(var.shape)

    def var_names(self) -> list[str]:
        return list(self._names)

    # -- constraints -----------------------------------------------------
    def _own(self, expr) -> LinExpr:
        if isinstance(expr, LinExpr):
            if expr.model is not self:
                raise UndeclaredVariable("constraint references a variable of another model")
            if expr.coef.shape[1] > self.n_vars:
                raise UndeclaredVariable("constraint references an undeclared variable")
            return expr
        return self.constant(expr)

    def _push_rows(self, coef: sp.csr_matrix, lo: np.ndarray, hi: np.ndarray,
                   name: str | None) -> ConstraintHandle:
        start = self._n_rows
        self._blocks.append((coef, lo, hi))
        self._n_rows += coef.shape[0]
        self._row_names.append((start, self._n_rows, name))
        self._compiled = None
        return ConstraintHandle(start, self._n_rows, name)

    def add_constraint(self, lhs, sense: str, rhs=0.0, name: str | None = None) -> ConstraintHandle:
        """Add ``lhs <sense> rhs`` elementwise; sense is ``"<="``, ``">="`` or ``"=="``."""
        self._check_open()
        lhs = self._own(lhs)
        rhs = self._own(rhs) if isinstance(rhs, LinExpr) else rhs
        diff = (lhs - rhs).ravel()
        w = self.n_vars
        coef = _pad(diff.coef, w)
        b = -diff.const
        k = coef.shape[0]
        if sense == "<=":
            lo, hi = np.full(k, -INF), b
        elif sense == ">=":
            lo, hi = b, np.full(k, INF)
        elif sense in ("==", "="):
            lo, hi = b, b.copy()
        else:
            raise ValueError(f"unknown sense {sense!r}")
        return self._push_rows(coef, lo, hi, name)

    def interval_sup(self, expr: LinExpr) -> np.ndarray:
        """Upper bound of each entry of ``expr`` over the variable bounds box."""
        coef = _pad(self._own(expr).ravel().coef, self.n_vars)
        lb = np.asarray(self._lb)
        ub = np.asarray(self._ub)
        pos = coef.maximum(0)
        neg = coef.minimum(0)
        with np.errstate(invalid="ignore"):
            sup = pos @ ub + neg @ lb + expr.ravel().const
        return np.where(np.isnan(sup), INF, sup)

    def add_big_m(self, expr, binary: LinExpr, M=None, group: str | None = None) -> BigMRecord:
        """Enforce ``expr <= M (1 - binary)`` elementwise.

        With ``M=None`` the constant is derived per row from interval
        arithmetic over the variable bounds and clamped to
        ``[BIG_M_MIN, big_m_max]``; rows with an unbounded interval use
        ``BIG_M_DEFAULT``.
        """
        self._check_open()
        expr = self._own(expr).ravel()
        if binary.index is None or binary.size != 1:
            raise ValueError("big-M indicator must be a single binary variable")
        b_idx = int(np.asarray(binary.index).ravel()[0])
        if not self._binary[b_idx]:
            raise ValueError("big-M indicator must be binary")
        clamped = False
        if M is None:
            sup = self.interval_sup(expr)
            M = np.where(np.isfinite(sup), sup, self.BIG_M_DEFAULT)
            clamped = bool(np.any(M > self.big_m_max))
            M = np.clip(M, self.BIG_M_MIN, self.big_m_max)
        M = np.broadcast_to(np.asarray(M, dtype=float), (expr.size,)).copy()
        # expr + M*b <= M
        ind = sp.csr_matrix((M, (np.arange(expr.size), np.full(expr.size, b_idx))),
                            shape=(expr.size, self.n_vars))
        coef = _pad(expr.coef, self.n_vars) + ind
        handle = self._push_rows(coef, np.full(expr.size, -INF), M - expr.const, group)
        rec = BigMRecord(group, handle, M, b_idx, clamped)
        self.big_m.append(rec)
        return rec

    def add_sos1(self, binaries: LinExpr) -> None:
        """Register a group of binaries that sum to one (branching hint)."""
        idx = np.asarray(binaries.index).ravel()
        self.add_constraint(binaries.sum(), "==", 1.0, name="sos1")
        if idx.size > 1:
            self.sos1.append(idx)

    def set_objective(self, expr) -> None:
        self._check_open()
        expr = self._own(expr)
        if expr.size != 1:
            raise ValueError("objective must be scalar")
        self.objective = expr.reshape(())
        self._compiled = None

    # -- compilation -----------------------------------------------------
    def compile(self) -> CompiledModel:
        if self._compiled is not None and self._compiled.c.size == self.n_vars:
            return self._compiled
        n = self.n_vars
        if self._blocks:
            A = sp.vstack([_pad(b[0], n) for b in self._blocks], format="csr")
            lo = np.concatenate([b[1] for b in self._blocks])
            hi = np.concatenate([b[2] for b in self._blocks])
        else:
            A = sp.csr_matrix((0, n))
            lo = hi = np.zeros(0)
        if self.objective is not None:
            c = np.asarray(_pad(self.objective.coef, n).todense()).ravel()
            c0 = float(self.objective.const[0])
        else:
            c, c0 = np.zeros(n), 0.0
        self._compiled = CompiledModel(
            c=c, c0=c0, A=A, row_lo=lo, row_hi=hi,
            lb=np.asarray(self._lb, dtype=float), ub=np.asarray(self._ub, dtype=float),
            integrality=np.asarray(self._binary, dtype=bool),
        )
        return self._compiled

    def constraint_names(self) -> list[str | None]:
        names: list[str | None] = []
        for start, stop, name in self._row_names:
            names.extend([name] * (stop - start))
        return names

    def max_violation(self, x: np.ndarray) -> float:
        """Largest constraint or bound violation of assignment ``x``."""
        cm = self.compile()
        if x.size == 0:
            return 0.0
        ax = cm.A @ x
        v = [0.0]
        if ax.size:
            v.append(float(np.max(np.maximum(cm.row_lo - ax, ax - cm.row_hi), initial=0.0)))
        v.append(float(np.max(np.maximum(cm.lb - x, x - cm.ub), initial=0.0)))
        return max(v)


# ---------------------------------------------------------------------------
# Solutions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MilpSolution:
    status: Status
    x: np.ndarray | None
    objective: float
    gap: float = 0.0
    stats: dict = field(default_factory=dict)
    certificate: dict | None = None

    @property
    def has_solution(self) -> bool:
        return self.x is not None and self.status in (
            Status.OPTIMAL, Status.FEASIBLE, Status.GAP_LIMIT, Status.NODE_LIMIT, Status.TIME_LIMIT)

    def value(self, expr: LinExpr) -> np.ndarray:
        if self.x is None:
            raise ValueError(f"no assignment available (status {self.status.value})")
        coef = _pad(expr.coef, self.x.size)
        return (coef @ self.x + expr.const).reshape(expr.shape)


# ---------------------------------------------------------------------------
# LP
# ---------------------------------------------------------------------------

_LP_METHODS = ("highs-ds", "highs-ipm", "highs")


def _lp_core(cm: CompiledModel, lb: np.ndarray, ub: np.ndarray):
    n = cm.c.size
    if n == 0:
        ok = np.all(cm.row_lo <= 0) and np.all(cm.row_hi >= 0)
        return (0 if ok else 2), np.zeros(0), cm.c0, None
    bounds = np.column_stack([lb, ub])
    last = None
    for method in _LP_METHODS:
        _tick()
        res = linprog(cm.c, A_ub=cm.A_ub, b_ub=cm.b_ub, A_eq=cm.A_eq, b_eq=cm.b_eq,
                      bounds=bounds, method=method)
        last = res
        if res.status in (0, 2, 3):
            break
    if last.status == 4 or (last.status == 1 and last.x is None):
        raise NumericalFailure(last.message)
    x = None if last.x is None else np.asarray(last.x, dtype=float)
    obj = INF if x is None else float(cm.c @ x + cm.c0)
    return last.status, x, obj, last


def _cs_residual(cm: CompiledModel, res, x: np.ndarray, lb, ub) -> float:
    r = 0.0
    if res is None:
        return r
    if cm.A_ub is not None and getattr(res, "ineqlin", None) is not None:
        slack = cm.b_ub - cm.A_ub @ x
        r = max(r, float(np.max(np.abs(res.ineqlin.marginals * slack), initial=0.0)))
    if getattr(res, "lower", None) is not None:
        fin = np.isfinite(lb)
        r = max(r, float(np.max(np.abs(res.lower.marginals[fin] * (x - lb)[fin]), initial=0.0)))
    if getattr(res, "upper", None) is not None:
        fin = np.isfinite(ub)
        r = max(r, float(np.max(np.abs(res.upper.marginals[fin] * (ub - x)[fin]), initial=0.0)))
    return r


def _stacked_inequalities(cm: CompiledModel, lb, ub):
    """All inequality rows (including finite bounds) as ``R x <= r``."""
    n = cm.c.size
    R, r = [], []
    if cm.A_ub is not None:
        R.append(cm.A_ub)
        r.append(cm.b_ub)
    fin_u = np.flatnonzero(np.isfinite(ub))
    fin_l = np.flatnonzero(np.isfinite(lb))
    if fin_u.size:
        R.append(sp.csr_matrix((np.ones(fin_u.size), (np.arange(fin_u.size), fin_u)), shape=(fin_u.size, n)))
        r.append(ub[fin_u])
    if fin_l.size:
        R.append(sp.csr_matrix((-np.ones(fin_l.size), (np.arange(fin_l.size), fin_l)), shape=(fin_l.size, n)))
        r.append(-lb[fin_l])
    R = sp.vstack(R, format="csr") if R else sp.csr_matrix((0, n))
    r = np.concatenate(r) if r else np.zeros(0)
    return R, r


def farkas_certificate(cm: CompiledModel, lb, ub) -> dict | None:
    """Find ``y >= 0, z`` with ``R'y + E'z = 0`` and ``r'y + e'z = -1``.

    ``R x <= r`` stacks inequality rows and finite bounds, ``E x = e`` the
    equality rows. Existence proves the system infeasible.
    """
    R, r = _stacked_inequalities(cm, lb, ub)
    E = cm.A_eq if cm.A_eq is not None else sp.csr_matrix((0, cm.c.size))
    e = cm.b_eq if cm.b_eq is not None else np.zeros(0)
    k, q = R.shape[0], E.shape[0]
    M = sp.hstack([R.T, E.T], format="csr")
    A_eq = sp.vstack([M, sp.csr_matrix(np.concatenate([r, e])[None, :])], format="csr")
    b_eq = np.concatenate([np.zeros(cm.c.size), [-1.0]])
    bounds = [(0, None)] * k + [(None, None)] * q
    res = linprog_counted(np.concatenate([np.ones(k), np.zeros(q)]), A_eq=A_eq, b_eq=b_eq,
                          bounds=bounds, method="highs")
    if res.status != 0:
        return None
    return {"y_ineq": res.x[:k], "z_eq": res.x[k:], "R": R, "r": r, "E": E, "e": e}


def unbounded_ray(cm: CompiledModel, lb, ub) -> np.ndarray | None:
    """Direction ``d`` with ``c'd < 0`` keeping every constraint satisfied."""
    n = cm.c.size
    R, _ = _stacked_inequalities(cm, lb, ub)
    res = linprog_counted(cm.c, A_ub=R if R.shape[0] else None, b_ub=np.zeros(R.shape[0]) if R.shape[0] else None,
                          A_eq=cm.A_eq, b_eq=None if cm.A_eq is None else np.zeros(cm.A_eq.shape[0]),
                          bounds=[(-1, 1)] * n, method="highs")
    if res.status != 0 or res.fun >= -1e-12:
        return None
    return np.asarray(res.x)


def solve_lp(model: MilpModel, fixed: dict[int, float] | None = None) -> MilpSolution:
    """Solve the LP relaxation of ``model``.

    Binary variables are relaxed to ``[0, 1]`` unless pinned through
    ``fixed`` (a mapping of variable index to value). Infeasible results
    carry a Farkas certificate, unbounded ones a recession ray.
    """
    model.frozen = True
    cm = model.compile()
    lb, ub = cm.lb.copy(), cm.ub.copy()
    for j, v in (fixed or {}).items():
        lb[j] = ub[j] = float(v)
    t0 = time.perf_counter()
    status, x, obj, res = _lp_core(cm, lb, ub)
    stats = {"wall_time": time.perf_counter() - t0, "lp_iterations": int(getattr(res, "nit", 0) or 0),
             "bnb_nodes": 0}
    if status == 0:
        stats["cs_residual"] = _cs_residual(cm, res, x, lb, ub)
        return MilpSolution(Status.OPTIMAL, x, obj, 0.0, stats)
    if status == 2:
        return MilpSolution(Status.INFEASIBLE, None, INF, INF, stats, farkas_certificate(cm, lb, ub))
    if status == 3:
        ray = unbounded_ray(cm, lb, ub)
        return MilpSolution(Status.UNBOUNDED, None, -INF, INF, stats, None if ray is None else {"ray": ray})
    raise NumericalFailure(f"LP status {status}")


# ---------------------------------------------------------------------------
# MILP
# ---------------------------------------------------------------------------

INT_TOL = 1e-6


def _polish(cm: CompiledModel, x: np.ndarray, lb, ub):
    """Round binaries and re-solve the continuous part with them fixed."""
    ints = np.flatnonzero(cm.integrality)
    lb, ub = lb.copy(), ub.copy()
    xr = np.round(x[ints])
    lb[ints] = ub[ints] = xr
    status, xp, obj, _ = _lp_core(cm, lb, ub)
    if status == 0:
        xp[ints] = xr
        return xp, float(cm.c @ xp + cm.c0)
    return None, INF


def _bnb(model: MilpModel, cm: CompiledModel, config: MilpConfig) -> MilpSolution:
    t0 = time.perf_counter()
    ints = np.flatnonzero(cm.integrality)
    sos_of: dict[int, np.ndarray] = {}
    for grp in model.sos1:
        for j in grp:
            sos_of[int(j)] = grp
    counter = itertools.count()
    heap: list = []
    incumbent, inc_obj = None, INF
    nodes = 0
    lp_iters = 0
    bound_history: list[float] = []

    def evaluate(lb, ub):
        nonlocal incumbent, inc_obj, nodes, lp_iters
        nodes += 1
        status, x, obj, res = _lp_core(cm, lb, ub)
        lp_iters += int(getattr(res, "nit", 0) or 0)
        if status == 3:
            return "unbounded"
        if status != 0 or obj >= inc_obj - config.gap_tol:
            return None
        frac = np.abs(x[ints] - np.round(x[ints]))
        if ints.size == 0 or frac.max(initial=0.0) <= INT_TOL:
            xp, op = _polish(cm, x, lb, ub) if config.polish and ints.size else (x, obj)
            if xp is None:
                xp, op = x, obj
            if op < inc_obj:
                incumbent, inc_obj = xp, op
            return None
        heapq.heappush(heap, (obj, next(counter), lb, ub, x))
        return None

    root = evaluate(cm.lb.copy(), cm.ub.copy())
    if root == "unbounded":
        return MilpSolution(Status.UNBOUNDED, None, -INF, INF, {"bnb_nodes": nodes})
    status = None
    best_bound = -INF
    while heap:
        obj, _, lb, ub, x = heapq.heappop(heap)
        if obj >= inc_obj - config.gap_tol:
            continue
        best_bound = max(best_bound, obj)
        bound_history.append(best_bound)
        if nodes >= config.node_limit:
            heapq.heappush(heap, (obj, next(counter), lb, ub, x))
            status = Status.NODE_LIMIT
            break
        if config.time_limit_s is not None and time.perf_counter() - t0 > config.time_limit_s:
            heapq.heappush(heap, (obj, next(counter), lb, ub, x))
            status = Status.TIME_LIMIT
            break
        xi = x[ints]
        score = np.abs(xi - np.round(xi))
        j = int(ints[int(np.argmax(score))])  # argmax keeps the lowest index on ties
        # down branch
        lb_d, ub_d = lb.copy(), ub.copy()
        ub_d[j] = 0.0
        evaluate(lb_d, ub_d)
        # up branch; within an SOS1 group this pins the rest of the group to zero
        lb_u, ub_u = lb.copy(), ub.copy()
        lb_u[j] = 1.0
        grp = sos_of.get(j)
        if grp is not None:
            others = grp[grp != j]
            ub_u[others] = 0.0
            lb_u[others] = np.minimum(lb_u[others], 0.0)
        evaluate(lb_u, ub_u)

    open_bound = min((h[0] for h in heap), default=INF)
    final_bound = min(open_bound, inc_obj)
    stats = {"bnb_nodes": nodes, "lp_iterations": lp_iters, "wall_time": time.perf_counter() - t0,
             "bound_history": bound_history, "best_bound": final_bound}
    if status is None:
        if incumbent is None:
            return MilpSolution(Status.INFEASIBLE, None, INF, INF, stats)
        return MilpSolution(Status.OPTIMAL, incumbent, inc_obj, 0.0, stats)
    gap = INF if incumbent is None else max(0.0, (inc_obj - final_bound) / max(1.0, abs(inc_obj)))
    return MilpSolution(status, incumbent, inc_obj, gap, stats)


def _highs(cm: CompiledModel, config: MilpConfig) -> MilpSolution:
    t0 = time.perf_counter()
    opts: dict[str, Any] = {"disp": False, "mip_rel_gap": config.gap_tol, "node_limit": int(config.node_limit)}
    if config.time_limit_s is not None:
        opts["time_limit"] = float(config.time_limit_s)
    cons = [LinearConstraint(cm.A, cm.row_lo, cm.row_hi)] if cm.A.shape[0] else []
    _tick()
    res = _scipy_milp(cm.c, integrality=cm.integrality.astype(int), bounds=Bounds(cm.lb, cm.ub),
                      constraints=cons, options=opts)
    stats = {"bnb_nodes": int(getattr(res, "mip_node_count", 0) or 0), "wall_time": time.perf_counter() - t0,
             "best_bound": getattr(res, "mip_dual_bound", None)}
    if res.status == 2:
        return MilpSolution(Status.INFEASIBLE, None, INF, INF, stats)
    if res.status == 3:
        return MilpSolution(Status.UNBOUNDED, None, -INF, INF, stats)
    if res.x is None:
        if res.status == 1:
            limit = Status.TIME_LIMIT if "time" in str(res.message).lower() else Status.NODE_LIMIT
            return MilpSolution(limit, None, INF, INF, stats)
        raise NumericalFailure(str(res.message))
    x = np.asarray(res.x, dtype=float)
    obj = float(cm.c @ x + cm.c0)
    if config.polish and cm.integrality.any():
        xp, op = _polish(cm, x, cm.lb, cm.ub)
        if xp is not None:
            x, obj = xp, op
    gap = float(getattr(res, "mip_gap", 0.0) or 0.0)
    if res.status == 0:
        return MilpSolution(Status.OPTIMAL, x, obj, max(gap, 0.0), stats)
    msg = str(res.message).lower()
    status = Status.TIME_LIMIT if "time" in msg else Status.NODE_LIMIT
    return MilpSolution(status, x, obj, max(gap, 0.0), stats)


def solve_milp(model: MilpModel, config: MilpConfig | None = None) -> MilpSolution:
    """Solve ``model`` to (gap-tolerance) optimality.

    The default backend is best-bound branch and bound with
    most-fractional branching over :func:`solve_lp` relaxations.
    ``config.backend="highs"`` hands the whole model to HiGHS instead.
    """
    config = config or MilpConfig()
    if model.n_binaries == 0:
        return solve_lp(model)
    model.frozen = True
    cm = model.compile()
    if config.backend == "bnb":
        return _bnb(model, cm, config)
    if config.backend == "highs":
        return _highs(cm, config)
    raise ValueError(f"unknown MILP backend {config.backend!r}")


def brute_force_milp(model: MilpModel) -> tuple[float, np.ndarray | None]:
    """Minimum over every binary assignment, each solved with :func:`solve_lp`.

    Exponential; meant as a test oracle for small models.
    """
    ints = model.binary_indices
    best, arg = INF, None
    for bits in itertools.product((0.0, 1.0), repeat=ints.size):
        sol = solve_lp(model, fixed=dict(zip(ints.tolist(), bits)))
        if sol.status is Status.OPTIMAL and sol.objective < best:
            best, arg = sol.objective, sol.x
    return best, arg


# ---------------------------------------------------------------------------
# LP-format export
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def _terms(row_idx: np.ndarray, row_val: np.ndarray, names: list[str]) -> list[str]:
    out = []
    for j, a in zip(row_idx, row_val):
        sign = "-" if a < 0 else "+"
        out.append(f"{sign} {_fmt(abs(a))} {names[j]}")
    return out


def _wrap(prefix: str, terms: list[str], suffix: str = "") -> list[str]:
    lines, cur = [], prefix
    for t in terms:
        if len(cur) + len(t) > 200:
            lines.append(cur)
            cur = "   "
        cur += " " + t
    cur += suffix
    lines.append(cur)
    return lines


def export_model(model: MilpModel, fmt: str = "lp_text") -> str:
    """Render ``model`` as CPLEX LP-format text.

    Variables are named ``v<index>``; every variable appears in the
    objective line (possibly with a zero coefficient) so that readers
    keep the column order.
    """
    if fmt != "lp_text":
        raise UnsupportedFormat(fmt)
    cm = model.compile()
    n = cm.c.size
    names = [f"v{j}" for j in range(n)]
    out = [f"\\ model {model.name}: {n} variables, {cm.A.shape[0]} rows, {int(cm.integrality.sum())} binaries",
           "Minimize"]
    obj_terms = [f"{'-' if a < 0 else '+'} {_fmt(abs(a))} {names[j]}" for j, a in enumerate(cm.c)]
    if cm.c0 != 0.0 or not obj_terms:
        obj_terms.append(f"{'-' if cm.c0 < 0 else '+'} {_fmt(abs(cm.c0))}")
    out.extend(_wrap(" obj:", obj_terms))
    out.append("Subject To")
    A = cm.A
    for i in range(A.shape[0]):
        lo, hi = cm.row_lo[i], cm.row_hi[i]
        s, e = A.indptr[i], A.indptr[i + 1]
        terms = _terms(A.indices[s:e], A.data[s:e], names)
        if not terms:
            terms = [f"+ 0 {names[0]}"] if n else ["0"]
        if np.isfinite(lo) and np.isfinite(hi) and lo == hi:
            out.extend(_wrap(f" c{i}:", terms, f" = {_fmt(hi)}"))
        else:
            if np.isfinite(hi):
                out.extend(_wrap(f" c{i}:", terms, f" <= {_fmt(hi)}"))
            if np.isfinite(lo):
                out.extend(_wrap(f" c{i}_lo:" if np.isfinite(hi) else f" c{i}:", terms, f" >= {_fmt(lo)}"))
    out.append("Bounds")
    for j in range(n):
        if cm.integrality[j]:
            continue
        lb, ub = cm.lb[j], cm.ub[j]
        if not np.isfinite(lb) and not np.isfinite(ub):
            out.append(f" {names[j]} free")
        elif lb == ub:
            out.append(f" {names[j]} = {_fmt(lb)}")
        else:
            lo_s = _fmt(lb) if np.isfinite(lb) else "-inf"
            hi_s = _fmt(ub) if np.isfinite(ub) else "+inf"
            out.append(f" {lo_s} <= {names[j]} <= {hi_s}")
    bins = [names[j] for j in np.flatnonzero(cm.integrality)]
    if bins:
        out.append("Binaries")
        for k in range(0, len(bins), 10):
            out.append(" " + " ".join(bins[k:k + 10]))
    out.append("End")
    return "\n".join(out) + "\n"


def iter_rows(model: MilpModel) -> Iterable[tuple[np.ndarray, np.ndarray, float, float]]:
    cm = model.compile()
    for i in range(cm.A.shape[0]):
        s, e = cm.A.indptr[i], cm.A.indptr[i + 1]
        yield cm.A.indices[s:e], cm.A.data[s:e], cm.row_lo[i], cm.row_hi[i]
