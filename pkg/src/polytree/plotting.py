"""Matplotlib figures for trees, traces and growth statistics (written to files)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LinearSegmentedColormap, Normalize  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402
from scipy.spatial import ConvexHull, QhullError  # noqa: E402

from . import geometry as geo  # noqa: E402

GREEN_RED = LinearSegmentedColormap.from_list("green_red", ["#1a9850", "#d73027"])
plt.rcParams.update({"svg.hashsalt": "polytree", "svg.fonttype": "none"})


def projected_outline(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull of 2D points; degenerate sets fall back to a segment."""
    pts = np.unique(np.round(points, 12), axis=0)
    if len(pts) >= 3:
        try:
            return pts[ConvexHull(pts).vertices]
        except QhullError:
            pass
    if len(pts) == 1:
        return pts
    d = pts - pts.mean(axis=0)
    axis = np.linalg.svd(d, full_matrices=False)[2][0]
    s = d @ axis
    return pts[[int(np.argmin(s)), int(np.argmax(s))]]


def _labels(system, proj):
    names = system.meta.get("state_names") or [f"x{i}" for i in range(system.n)]
    units = system.meta.get("units") or []
    out = []
    for i in proj:
        u = f" [{units[i]}]" if i < len(units) else ""
        out.append(f"{names[i]}{u}")
    return out


def plot_tree(tree, proj: Sequence[int], path: str | Path, trace: np.ndarray | None = None,
              title: str | None = None) -> int:
    """Draw every node projected on coordinates ``proj``, colored by value.

    Returns the number of node polygons drawn. Each polygon carries the
    SVG id ``node<k>``; an optional trace is drawn as the polyline ``trace``.
    """
    i, j = int(proj[0]), int(proj[1])
    n = tree.system.n
    if not (0 <= i < n and 0 <= j < n) or i == j:
        raise ValueError(f"projection {proj} is not a pair of distinct state coordinates below {n}")
    V = np.asarray(tree.values, dtype=float)
    norm = Normalize(0.0, max(float(V.max(initial=0.0)), 1e-12))
    fig, ax = plt.subplots(figsize=(6.4, 5.6))
    # draw high values first so low-value funnels stay visible on top
    for node in sorted(tree.nodes, key=lambda v: (-v.V, v.id)):
        verts = geo.node_vertices(node.polytope).points[:, [i, j]]
        outline = projected_outline(verts)
        patch = Polygon(outline, closed=True, facecolor=GREEN_RED(norm(node.V)), edgecolor="k",
                        linewidth=0.3, alpha=0.85)
        patch.set_gid(f"node{node.id}")
        ax.add_patch(patch)
    glo, ghi = geo.bounding_box(tree.system.goal)
    ax.add_patch(Polygon(geo.box_vertices(glo[[i, j]], ghi[[i, j]])[[0, 1, 3, 2]], closed=True, fill=False,
                         edgecolor="navy", linewidth=1.2, label="goal"))
    lo, hi = geo.bounding_box(tree.system.state_box)
    if trace is not None and len(trace):
        (line,) = ax.plot(trace[:, i], trace[:, j], "-o", color="k", markersize=2, linewidth=0.8, label="trace")
        line.set_gid("trace")
    ax.set_xlim(lo[i], hi[i])
    ax.set_ylim(lo[j], hi[j])
    xl, yl = _labels(tree.system, (i, j))
    ax.set_xlabel(xl)
    ax.set_ylabel(yl)
    ax.set_title(title or f"{tree.system.name or 'tree'}: {len(tree)} nodes")
    sm = plt.cm.ScalarMappable(norm=norm, cmap=GREEN_RED)
    fig.colorbar(sm, ax=ax, label="cost-to-go V")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format=Path(path).suffix.lstrip(".") or "svg", metadata={"Date": None})
    plt.close(fig)
    return len(tree)


def plot_coverage(stats: Sequence[dict], path: str | Path) -> None:
    """Coverage estimate and tree size against iteration."""
    rows = [r for r in stats if r.get("iteration", -1) >= 0]
    its = [r["iteration"] for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    cov = [(r["iteration"], r["coverage"]) for r in rows if r.get("coverage") is not None]
    if cov:
        ax.plot(*zip(*cov), "-o", color="#1a9850", label="coverage estimate")
    ax.set_xlabel("iteration")
    ax.set_ylabel("fraction of state samples in tree")
    ax.set_ylim(0, 1)
    ax2 = ax.twinx()
    ax2.step(its, [r["n_nodes"] for r in rows], where="post", color="0.4", label="nodes")
    ax2.set_ylabel("nodes")
    fig.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_trace(system, states: np.ndarray, inputs: np.ndarray, path: str | Path) -> None:
    """States and inputs of a closed-loop run against time step."""
    names = system.meta.get("state_names") or [f"x{i}" for i in range(system.n)]
    unames = system.meta.get("input_names") or [f"u{i}" for i in range(system.m)]
    fig, (ax, bx) = plt.subplots(2, 1, figsize=(6.4, 5.0), sharex=True)
    for k in range(states.shape[1]):
        ax.plot(states[:, k], label=names[k])
    ax.set_ylabel("state")
    ax.legend(fontsize=8)
    if len(inputs):
        for k in range(inputs.shape[1]):
            bx.step(np.arange(len(inputs)), inputs[:, k], where="post", label=unames[k])
        bx.legend(fontsize=8)
    bx.set_xlabel("step")
    bx.set_ylabel("input")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
