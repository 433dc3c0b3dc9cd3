"""Polytopes in halfspace and affine-image form.

``HPolytope`` is ``{x | H x <= h}``; ``AHPolytope`` is the affine image
``{xbar} + G P`` of a template polytope ``P`` (the unit cube unless stated
otherwise). Tree nodes are AH-polytopes, cells and goal sets are
H-polytopes.

Containment ``Q Y + q <= Z`` is encoded with nonnegative multipliers
``Lam`` satisfying ``Lam H_y = H_z Q`` and ``Lam h_y <= h_z - H_z q``; with
several candidate targets, the transform is split across targets and a
binary selector picks the one that holds.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from . import milp
from .errors import DimensionMismatch, EmptySet, Unbounded

EPS = 1e-5
MEMBERSHIP_TOL = 1e-6
CONSTRAINT_TOL = 1e-7


def _finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains NaN or Inf")
    return arr


@dataclass(frozen=True, eq=False)
class HPolytope:
    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        h = np.asarray(self.h, dtype=float).ravel()
        if H.shape[0] != h.size:
            raise DimensionMismatch(f"H has {H.shape[0]} rows but h has {h.size} entries")
        if H.size and np.any(np.all(H == 0.0, axis=1)):
            raise ValueError("H contains an all-zero row")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def n_rows(self) -> int:
        return self.H.shape[0]

    @classmethod
    def box(cls, lower, upper) -> "HPolytope":
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        n = lower.size
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))

    def contains(self, x, tol: float = CONSTRAINT_TOL) -> bool:
        return bool(np.all(self.H @ np.asarray(x, dtype=float) <= self.h + tol))

    def contains_many(self, X: np.ndarray, tol: float = CONSTRAINT_TOL) -> np.ndarray:
        return np.all(np.asarray(X) @ self.H.T <= self.h + tol, axis=1)

    def margin(self, x) -> float:
        """Smallest slack ``min(h - H x)``; negative outside."""
        return float(np.min(self.h - self.H @ np.asarray(x, dtype=float)))

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return bounding_box(self)

    def to_dict(self) -> dict:
        return {"H": _finite(self.H, "H").tolist(), "h": _finite(self.h, "h").tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "HPolytope":
        return cls(_finite(np.asarray(data["H"], dtype=float), "H"), _finite(np.asarray(data["h"], dtype=float), "h"))

    def product(self, other: "HPolytope") -> "HPolytope":
        """Cartesian product ``self x other``."""
        H = np.block([[self.H, np.zeros((self.n_rows, other.dim))],
                      [np.zeros((other.n_rows, self.dim)), other.H]])
        return HPolytope(H, np.concatenate([self.h, other.h]))

    def normalized(self) -> "HPolytope":
        norms = np.linalg.norm(self.H, axis=1)
        return HPolytope(self.H / norms[:, None], self.h / norms)


@dataclass(frozen=True, eq=False)
class TemplatePolytope:
    poly: HPolytope
    is_unit_cube: bool = False
    symmetric: bool = False

    def __post_init__(self):
        if not np.all(self.poly.h > 0):
            raise ValueError("template must contain the origin in its interior")

    @classmethod
    def unit_cube(cls, n: int) -> "TemplatePolytope":
        return cls(HPolytope.box(-np.ones(n), np.ones(n)), is_unit_cube=True, symmetric=True)

    @property
    def dim(self) -> int:
        return self.poly.dim

    def contains(self, p, tol: float = MEMBERSHIP_TOL) -> bool:
        if self.is_unit_cube:
            return bool(np.max(np.abs(p), initial=0.0) <= 1.0 + tol)
        return self.poly.contains(p, tol)


def regularize(G: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Add ``eps`` to every singular value of ``G`` smaller than ``eps``."""
    U, s, Vt = np.linalg.svd(G)
    s = np.where(s < eps, s + eps, s)
    return (U * s) @ Vt


@dataclass(frozen=True, eq=False)
class AHPolytope:
    xbar: np.ndarray
    G: np.ndarray
    template: TemplatePolytope = None  # type: ignore[assignment]

    def __post_init__(self):
        xbar = np.asarray(self.xbar, dtype=float).ravel()
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        if G.shape[0] != xbar.size:
            raise DimensionMismatch("G rows must match the state dimension")
        template = self.template or TemplatePolytope.unit_cube(G.shape[1])
        if template.dim != G.shape[1]:
            raise DimensionMismatch("G columns must match the template dimension")
        object.__setattr__(self, "xbar", xbar)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "template", template)

    @property
    def dim(self) -> int:
        return self.xbar.size

    @property
    def n_p(self) -> int:
        return self.G.shape[1]

    @property
    def is_parallelotope(self) -> bool:
        return self.template.is_unit_cube and self.n_p == self.dim

    @cached_property
    def _reg(self) -> dict:
        return {}

    def G_eps(self, eps: float = EPS) -> np.ndarray:
        if eps not in self._reg:
            Ge = regularize(self.G, eps)
            self._reg[eps] = (Ge, np.linalg.inv(Ge))
        return self._reg[eps][0]

    def G_eps_inv(self, eps: float = EPS) -> np.ndarray:
        self.G_eps(eps)
        return self._reg[eps][1]

    @cached_property
    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.G, compute_uv=False)

    def to_hpolytope(self, eps: float = EPS) -> HPolytope:
        """Halfspace form of the (regularized) parallelotope, rows normalized."""
        if not self.is_parallelotope:
            raise ValueError("halfspace conversion needs a square unit-cube template")
        Gi = self.G_eps_inv(eps)
        H = np.vstack([Gi, -Gi])
        h = np.ones(2 * self.dim) + H @ self.xbar
        return HPolytope(H, h).normalized()

    def to_dict(self) -> dict:
        if not self.template.is_unit_cube:
            raise ValueError("only unit-cube templates serialize")
        return {"xbar": _finite(self.xbar, "xbar").tolist(), "G": _finite(self.G, "G").tolist(),
                "template": "unit_cube"}

    @classmethod
    def from_dict(cls, data: dict) -> "AHPolytope":
        if data.get("template", "unit_cube") != "unit_cube":
            raise ValueError(f"unknown template {data.get('template')!r}")
        return cls(_finite(np.asarray(data["xbar"], dtype=float), "xbar"),
                   _finite(np.atleast_2d(np.asarray(data["G"], dtype=float)), "G"))


# ---------------------------------------------------------------------------
# LP utilities
# ---------------------------------------------------------------------------


def bounding_box(poly: HPolytope) -> tuple[np.ndarray, np.ndarray]:
    """Componentwise min and max over ``poly`` (2n LPs)."""
    n = poly.dim
    lo, hi = np.empty(n), np.empty(n)
    for k in range(n):
        for sign, out in ((1.0, lo), (-1.0, hi)):
            c = np.zeros(n)
            c[k] = sign
            res = milp.linprog_counted(c, A_ub=poly.H, b_ub=poly.h, bounds=[(None, None)] * n, method="highs")
            if res.status == 2:
                raise EmptySet("polytope is empty")
            if res.status == 3:
                raise Unbounded(f"polytope is unbounded along coordinate {k}")
            out[k] = sign * res.fun
    return lo, hi


def chebyshev_center(poly: HPolytope) -> tuple[np.ndarray, float]:
    """Center and radius of the largest inscribed Euclidean ball."""
    n = poly.dim
    norms = np.linalg.norm(poly.H, axis=1)
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A = np.hstack([poly.H, norms[:, None]])
    res = milp.linprog_counted(c, A_ub=A, b_ub=poly.h, bounds=[(None, None)] * n + [(0, None)], method="highs")
    if res.status == 2:
        raise EmptySet("polytope is empty")
    if res.status == 3:
        raise Unbounded("polytope is unbounded")
    return res.x[:n], float(res.x[-1])


def max_inscribed_box(poly: HPolytope) -> tuple[np.ndarray, np.ndarray]:
    """A large axis-aligned box inside ``poly``.

    Two LPs: first the largest box proportional to the bounding box, then
    the sum of relative half-widths is pushed up with that box as a floor.
    """
    lo, hi = bounding_box(poly)
    n = poly.dim
    scale = np.maximum((hi - lo) / 2.0, 1e-12)
    Habs = np.abs(poly.H)
    # vars: center (n), halfwidth (n), t
    A1 = np.hstack([poly.H, Habs, np.zeros((poly.n_rows, 1))])
    A2 = np.hstack([np.zeros((n, n)), -np.eye(n), scale[:, None]])
    A = np.vstack([A1, A2])
    b = np.concatenate([poly.h, np.zeros(n)])
    bounds = [(None, None)] * n + [(0, None)] * n + [(0, None)]
    c = np.zeros(2 * n + 1)
    c[-1] = -1.0
    res = milp.linprog_counted(c, A_ub=A, b_ub=b, bounds=bounds, method="highs")
    if res.status != 0:
        raise EmptySet("no inscribed box")
    t = res.x[-1]
    c2 = np.concatenate([np.zeros(n), -1.0 / scale, [0.0]])
    bounds2 = [(None, None)] * n + [(ti, None) for ti in t * scale * (1 - 1e-9)] + [(0, None)]
    res2 = milp.linprog_counted(c2, A_ub=A, b_ub=b, bounds=bounds2, method="highs")
    x = res2.x if res2.status == 0 else res.x
    center, w = x[:n], x[n:2 * n]
    return center - w, center + w


# ---------------------------------------------------------------------------
# Containment
# ---------------------------------------------------------------------------


@dataclass
class ContainmentCertificate:
    """Decision variables created by :func:`encode_containment`."""

    Lambdas: list
    deltas: milp.LinExpr | None
    Qs: list
    qs: list
    n_targets: int = 1

    def selected(self, solution: milp.MilpSolution) -> int:
        """Index of the target certified by ``solution``."""
        if self.deltas is None:
            return 0
        return int(np.argmax(solution.value(self.deltas)))


def _check_dims(Q_shape, q_size, Y: HPolytope, targets: Sequence[HPolytope]):
    if len(Q_shape) != 2 or Q_shape[1] != Y.dim:
        raise DimensionMismatch(f"Q must have {Y.dim} columns, got shape {Q_shape}")
    if q_size != Q_shape[0]:
        raise DimensionMismatch("qbar length must match the rows of Q")
    for Z in targets:
        if Z.dim != Q_shape[0]:
            raise DimensionMismatch(f"target dimension {Z.dim} != image dimension {Q_shape[0]}")


def encode_containment(model: milp.MilpModel, Q, qbar, Y: HPolytope, targets: Sequence[HPolytope],
                       binaries: milp.LinExpr | None = None, relax: bool = False,
                       name: str = "cont") -> ContainmentCertificate:
    """Constrain ``model`` so that ``Q Y + qbar`` lies in one of ``targets``.

    ``Q`` and ``qbar`` may be expressions or constants. With one target no
    binary is created. With several, ``binaries`` (one per target) may be
    supplied by the caller, e.g. to share mode selectors; otherwise fresh
    binaries summing to one are added. ``relax=True`` makes fresh selectors
    continuous on ``[0, 1]``.
    """
    targets = list(targets)
    if not targets:
        raise DimensionMismatch("at least one target is required")
    Qe = milp._as_expr(model, Q)
    qe = milp._as_expr(model, qbar).ravel()
    _check_dims(Qe.shape, qe.size, Y, targets)
    ny = Y.n_rows

    if len(targets) == 1 and binaries is None:
        Z = targets[0]
        Lam = model.add_variables((Z.n_rows, ny), 0.0, milp.INF, f"{name}_lam")
        model.add_constraint(Lam @ Y.H, "==", Z.H @ Qe, name=f"{name}_eq")
        model.add_constraint(Lam @ Y.h, "<=", Z.h - Z.H @ qe, name=f"{name}_rhs")
        return ContainmentCertificate([Lam], None, [Qe], [qe], 1)

    N = len(targets)
    if binaries is None:
        if relax:
            deltas = model.add_variables(N, 0.0, 1.0, f"{name}_delta")
            model.add_constraint(deltas.sum(), "==", 1.0, name=f"{name}_sum")
        else:
            deltas = model.add_binaries(N, f"{name}_delta")
            model.add_sos1(deltas)
    else:
        if binaries.size != N:
            raise DimensionMismatch("one selector per target is required")
        deltas = binaries.ravel()
    Lams, Qs, qs = [], [], []
    for i, Z in enumerate(targets):
        Qi = model.add_variables(Qe.shape, -milp.INF, milp.INF, f"{name}_Q{i}")
        qi = model.add_variables(qe.size, -milp.INF, milp.INF, f"{name}_q{i}")
        Lam = model.add_variables((Z.n_rows, ny), 0.0, milp.INF, f"{name}_lam{i}")
        model.add_constraint(Lam @ Y.H, "==", Z.H @ Qi, name=f"{name}_eq{i}")
        model.add_constraint(Lam @ Y.h + Z.H @ qi - deltas[i] * Z.h, "<=", 0.0, name=f"{name}_rhs{i}")
        Lams.append(Lam)
        Qs.append(Qi)
        qs.append(qi)
    model.add_constraint(milp._as_expr(model, sum(Qs[1:], Qs[0])), "==", Qe, name=f"{name}_Qsum")
    model.add_constraint(sum(qs[1:], qs[0]), "==", qe, name=f"{name}_qsum")
    return ContainmentCertificate(Lams, deltas, Qs, qs, N)


def check_containment(Q, qbar, Y: HPolytope, Z: HPolytope) -> bool:
    """True iff ``Q Y + qbar`` is a subset of ``Z`` (one LP over the multipliers)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    qbar = np.asarray(qbar, dtype=float).ravel()
    _check_dims(Q.shape, qbar.size, Y, [Z])
    model = milp.MilpModel("containment")
    encode_containment(model, Q, qbar, Y, [Z])
    return milp.solve_lp(model).status is milp.Status.OPTIMAL


# ---------------------------------------------------------------------------
# Membership and distances
# ---------------------------------------------------------------------------


def _lp_parameter(x: np.ndarray, node: AHPolytope) -> np.ndarray | None:
    """Minimum l1-norm ``p`` in the template with ``x = xbar + G p``."""
    n_p = node.n_p
    P = node.template.poly
    # p = pp - pn, both >= 0
    c = np.ones(2 * n_p)
    A_eq = np.hstack([node.G, -node.G])
    A_ub = np.hstack([P.H, -P.H])
    res = milp.linprog_counted(c, A_ub=A_ub, b_ub=P.h, A_eq=A_eq, b_eq=x - node.xbar,
                               bounds=[(0, None)] * (2 * n_p), method="highs")
    if res.status != 0:
        return None
    return res.x[:n_p] - res.x[n_p:]


def point_membership(x, node: AHPolytope, eps: float = EPS,
                     tol: float = MEMBERSHIP_TOL) -> tuple[bool, np.ndarray]:
    """Whether ``x`` is in the regularized node, and its template parameter ``p``."""
    x = np.asarray(x, dtype=float)
    if node.is_parallelotope:
        p = node.G_eps_inv(eps) @ (x - node.xbar)
        return bool(np.max(np.abs(p), initial=0.0) <= 1.0 + tol), p
    p = _lp_parameter(x, node)
    if p is None:
        p, *_ = np.linalg.lstsq(node.G, x - node.xbar, rcond=None)
        return False, p
    return node.template.contains(p, tol), p


def distance_to_node(x, node: AHPolytope, eps: float = EPS) -> float:
    """Closed-form distance: ``||G_eps (p - clip(p))||_inf`` with ``p = G_eps^-1 (x - xbar)``."""
    if not node.is_parallelotope:
        raise ValueError("closed-form distance needs a square unit-cube template")
    Ge = node.G_eps(eps)
    p = node.G_eps_inv(eps) @ (np.asarray(x, dtype=float) - node.xbar)
    return float(np.max(np.abs(Ge @ (p - np.clip(p, -1.0, 1.0))), initial=0.0))


def lp_distance(x, node: AHPolytope, norm: str = "linf") -> float:
    """Exact ``min ||delta||`` with ``x + delta = xbar + G p``, ``p`` in the template.

    Supported norms: ``"l1"`` and ``"linf"`` (both LPs).
    """
    x = np.asarray(x, dtype=float)
    n, n_p = node.dim, node.n_p
    P = node.template.poly
    # vars: p (n_p), delta (n), aux
    if norm == "linf":
        n_aux, c = 1, np.concatenate([np.zeros(n_p + n), [1.0]])
        tcols = np.ones((n, 1))
    elif norm == "l1":
        n_aux, c = n, np.concatenate([np.zeros(n_p + n), np.ones(n)])
        tcols = np.eye(n)
    else:
        raise ValueError(f"unsupported norm {norm!r}")
    A_eq = np.hstack([node.G, -np.eye(n), np.zeros((n, n_aux))])
    A_ub = np.vstack([
        np.hstack([P.H, np.zeros((P.n_rows, n + n_aux))]),
        np.hstack([np.zeros((n, n_p)), np.eye(n), -tcols]),
        np.hstack([np.zeros((n, n_p)), -np.eye(n), -tcols]),
    ])
    b_ub = np.concatenate([P.h, np.zeros(2 * n)])
    res = milp.linprog_counted(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=x - node.xbar,
                               bounds=[(None, None)] * (n_p + n) + [(0, None)] * n_aux, method="highs")
    if res.status != 0:
        raise EmptySet(f"distance LP failed: {res.message}")
    return float(res.fun)


class NodeStack:
    """Stacked parallelotope data for vectorized membership and distance.

    Rows are appended as nodes are added; arrays grow geometrically.
    """

    def __init__(self, dim: int, eps: float = EPS):
        self.dim = dim
        self.eps = eps
        self._n = 0
        cap = 16
        self._xbar = np.zeros((cap, dim))
        self._Ge = np.zeros((cap, dim, dim))
        self._Gi = np.zeros((cap, dim, dim))

    def __len__(self) -> int:
        return self._n

    def append(self, node: AHPolytope) -> None:
        if not node.is_parallelotope or node.dim != self.dim:
            raise DimensionMismatch("stack holds square unit-cube parallelotopes of one dimension")
        if self._n == self._xbar.shape[0]:
            cap = 2 * self._n
            self._xbar = np.resize(self._xbar, (cap, self.dim))
            self._Ge = np.resize(self._Ge, (cap, self.dim, self.dim))
            self._Gi = np.resize(self._Gi, (cap, self.dim, self.dim))
        self._xbar[self._n] = node.xbar
        self._Ge[self._n] = node.G_eps(self.eps)
        self._Gi[self._n] = node.G_eps_inv(self.eps)
        self._n += 1

    def params(self, x) -> np.ndarray:
        """Template parameter ``p_v(x)`` for every node, shape ``(N, n)``."""
        d = np.asarray(x, dtype=float)[None, :] - self._xbar[:self._n]
        return np.einsum("kij,kj->ki", self._Gi[:self._n], d)

    def distances(self, x) -> np.ndarray:
        p = self.params(x)
        r = p - np.clip(p, -1.0, 1.0)
        return np.max(np.abs(np.einsum("kij,kj->ki", self._Ge[:self._n], r)), axis=1, initial=0.0)

    def inside(self, x, tol: float = MEMBERSHIP_TOL) -> np.ndarray:
        p = self.params(x)
        return np.max(np.abs(p), axis=1, initial=0.0) <= 1.0 + tol


def batch_distance(x, nodes: Sequence[AHPolytope] | NodeStack, eps: float = EPS) -> np.ndarray:
    """Closed-form distance from ``x`` to every node at once."""
    if isinstance(nodes, NodeStack):
        return nodes.distances(x)
    nodes = list(nodes)
    if not nodes:
        return np.zeros(0)
    stack = NodeStack(nodes[0].dim, eps)
    for v in nodes:
        stack.append(v)
    return stack.distances(x)


# ---------------------------------------------------------------------------
# Sampling and vertices
# ---------------------------------------------------------------------------


def _chord(poly: HPolytope, x: np.ndarray, d: np.ndarray) -> tuple[float, float]:
    Hd = poly.H @ d
    slack = poly.h - poly.H @ x
    with np.errstate(divide="ignore"):
        t = slack / Hd
    t_hi = np.min(t[Hd > 0], initial=math.inf)
    t_lo = np.max(t[Hd < 0], initial=-math.inf)
    if not (np.isfinite(t_hi) and np.isfinite(t_lo)):
        raise Unbounded("hit-and-run chord is unbounded")
    return float(t_lo), float(t_hi)


def _interior_start(poly: HPolytope) -> np.ndarray:
    center, radius = chebyshev_center(poly)
    if radius <= 1e-12:
        raise EmptySet("polytope has no interior point")
    return center


def hit_and_run(poly: HPolytope, rng: np.random.Generator, n_samples: int, burn_in: int = 50,
                thin: int = 1, x0: np.ndarray | None = None) -> np.ndarray:
    """Draw ``n_samples`` points with a hit-and-run Markov chain."""
    x = _interior_start(poly) if x0 is None else np.asarray(x0, dtype=float).copy()
    out = np.empty((n_samples, poly.dim))
    total = burn_in + n_samples * thin
    k = 0
    for step in range(total):
        d = rng.standard_normal(poly.dim)
        d /= np.linalg.norm(d)
        lo, hi = _chord(poly, x, d)
        x = x + rng.uniform(lo, hi) * d
        if step >= burn_in and (step - burn_in) % thin == thin - 1:
            out[k] = x
            k += 1
    return out


def hit_and_run_sample(poly: HPolytope, rng: np.random.Generator, burn_in: int = 50,
                       x0: np.ndarray | None = None) -> np.ndarray:
    """One hit-and-run point after ``burn_in`` steps from the Chebyshev center."""
    return hit_and_run(poly, rng, 1, burn_in, 1, x0)[0]


class VertexSet(NamedTuple):
    points: np.ndarray
    subset: bool


def node_vertices(node: AHPolytope, max_full: int = 12) -> VertexSet:
    """Vertices ``xbar + G s`` over sign vectors, or axis points when ``n_p > max_full``."""
    n_p = node.n_p
    if n_p <= max_full:
        signs = np.array(list(itertools.product((1.0, -1.0), repeat=n_p)))
        return VertexSet(node.xbar + signs @ node.G.T, False)
    axis = np.vstack([np.eye(n_p), -np.eye(n_p)])
    return VertexSet(node.xbar + axis @ node.G.T, True)


def box_vertices(lower, upper) -> np.ndarray:
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    return np.array([np.where(s, upper, lower) for s in itertools.product((False, True), repeat=lower.size)])
