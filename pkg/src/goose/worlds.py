"""Problem generators, ground truth and graph heuristics.

Grid worlds use state augmentation: every node is a move ``(a -> b)`` between
adjacent cells, and move ``(a -> b)`` is followed by any move ``(b -> c)``.
A constraint on moves (a slope, say) thereby becomes a node constraint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cholesky
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .gp import KernelSpec, kernel_matrix, metric_matrix
from .graph import DecisionGraph, baseline_sets, chain_graph, grid_graph

__all__ = ['BoWorld', 'sample_gp_world', 'GridMdpWorld', 'augmented_grid',
           'sample_grid_world', 'grid_world_from_q', 'HeightWorld', 'load_heightmap',
           'height_world', 'min_cost_path', 'path_costs', 'PathHeuristic',
           'GoalDistanceHeuristic', 'epsilon_safe_regret', 'exploration_cost',
           'sample_gp']

BO_KERNELS = {1: KernelSpec('rbf', 0.1, 1.0), 2: KernelSpec('rbf', 0.4, 1.0)}
BO_SIZES = {1: 200, 2: 625}


def _factor(k: np.ndarray, variance: float, max_tries: int = 8) -> np.ndarray:
    """Cholesky factor with escalating diagonal jitter."""
    jitter = 0.0
    for i in range(max_tries):
        try:
            return cholesky(k + jitter * np.eye(len(k)), lower=True)
        except LinAlgError:
            jitter = variance * 10.0 ** (i - 10)
    raise LinAlgError("covariance is not positive definite even with jitter")


def sample_gp(kernel: KernelSpec, points, rng: np.random.Generator, mean=0.0):
    """One joint draw of a GP at ``points``."""
    k = kernel_matrix(kernel, points, points)
    chol = _factor(k, kernel.variance)
    return mean + chol @ rng.standard_normal(len(k))


# ---------------------------------------------------------------- safe BO

@dataclass
class BoWorld:
    graph: DecisionGraph
    true_f: np.ndarray
    true_q: np.ndarray
    seed: np.ndarray
    kernel: KernelSpec
    noise_std: float = 0.01

    @property
    def shared(self) -> bool:
        return self.true_f is self.true_q


def _bo_domain(dim: int, n: int):
    if dim == 1:
        points = np.linspace(-1.0, 1.0, n)
        return chain_graph(points)
    side = int(round(math.sqrt(n)))
    if side * side != n:
        raise ValueError("2-D worlds need a square number of points")
    axis = np.linspace(0.0, 1.0, side)
    xs, ys = np.meshgrid(axis, axis, indexing='ij')
    return grid_graph(side, side, np.column_stack([xs.ravel(), ys.ravel()]))


def sample_gp_world(dim: int, rng: np.random.Generator, kernel: Optional[KernelSpec] = None,
                    n: Optional[int] = None, noise_std: float = 0.01,
                    min_seed_value: float = 0.2, max_tries: int = 100) -> BoWorld:
    """Safe-BO world with ``f = q`` drawn from a zero-mean GP.

    The seed is the best of five evenly spaced candidate nodes; draws whose
    best candidate is below ``min_seed_value`` are rejected.
    """
    if dim not in (1, 2):
        raise ValueError("dim must be 1 or 2")
    kernel = kernel or BO_KERNELS[dim]
    n = n or BO_SIZES[dim]
    graph = _bo_domain(dim, n)
    candidates = np.round(np.linspace(0, n - 1, 7)[1:-1]).astype(int)
    k = kernel_matrix(kernel, graph.points, graph.points)
    chol = _factor(k, kernel.variance)
    for _ in range(max_tries):
        q = chol @ rng.standard_normal(n)
        best = candidates[np.argmax(q[candidates])]
        if q[best] >= min_seed_value:
            return BoWorld(graph, q, q, graph.mask([best]), kernel, noise_std)
    raise RuntimeError("no draw produced a safe seed")


# ------------------------------------------------------------ grid worlds

def augmented_grid(w: int, h: int, step: float = 1.0):
    """Move graph of a ``w x h`` 4-connected grid.

    Returns
    -------
    graph : DecisionGraph
        Nodes are moves, embedded at the midpoint of the two cells.
    moves : ndarray
        (n, 2) source and target cell ids, cell id = ``i * h + j``.
    """
    moves = []
    for i in range(w):
        for j in range(h):
            a = i * h + j
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                if 0 <= i + di < w and 0 <= j + dj < h:
                    moves.append((a, (i + di) * h + (j + dj)))
    moves = np.array(moves, dtype=int)
    cells = np.column_stack(np.divmod(np.arange(w * h), h)).astype(float)
    points = 0.5 * step * (cells[moves[:, 0]] + cells[moves[:, 1]])
    by_source = [[] for _ in range(w * h)]
    for idx, (a, _) in enumerate(moves):
        by_source[a].append(idx)
    edges = [(x, y) for x, (_, b) in enumerate(moves) for y in by_source[b]]
    return DecisionGraph(points, edges), moves


@dataclass
class GridMdpWorld:
    """Grid world over moves with a direction-independent constraint."""

    graph: DecisionGraph
    moves: np.ndarray
    width: int
    height: int
    true_q: np.ndarray
    seed: np.ndarray
    source: int
    goal: int
    kernel: KernelSpec
    prior_mean: float = 0.0
    noise_std: float = 0.01
    step: float = 1.0

    def reverse(self, node: int) -> int:
        a, b = self.moves[node]
        return int(np.flatnonzero((self.moves[:, 0] == b) & (self.moves[:, 1] == a))[0])

    def cell_xy(self, cell: int):
        return divmod(int(cell), self.height)


def _lattice_sample(w, h, kernel, rng, mean):
    # The midpoints of all moves lie on the half-integer lattice; sampling
    # there with a separable kernel keeps the draw cheap.
    xs = np.arange(2 * w - 1) / 2.0
    ys = np.arange(2 * h - 1) / 2.0
    scale = KernelSpec(kernel.family, kernel.lengthscale, 1.0)
    lx = _factor(kernel_matrix(scale, xs, xs), 1.0)
    ly = _factor(kernel_matrix(scale, ys, ys), 1.0)
    z = rng.standard_normal((len(xs), len(ys)))
    return mean + math.sqrt(kernel.variance) * lx @ z @ ly.T


def _block_seed(moves, w, h, cell, radius):
    """Moves between cells of the square block of ``radius`` around ``cell``."""
    ci, cj = divmod(int(cell), h)
    mi, mj = np.divmod(moves, h)
    inside = (np.abs(mi - ci) <= radius) & (np.abs(mj - cj) <= radius)
    return inside.all(axis=1)


def _pick_seed_goal(graph, moves, w, h, q, rng, margin, max_tries, radius=1):
    """Safe seed block around a start cell and a distant goal in the learnable region.

    The start node is a move into the start cell; the goal is a move in the
    region learnable with accuracy ``margin``, ending at Manhattan distance of at least half a
    side from the start cell.
    """
    cell_xy = np.column_stack(np.divmod(np.arange(w * h), h))
    min_dist = max(w, h) / 2.0
    for _ in range(max_tries):
        ci = int(rng.integers(radius, w - radius))
        cj = int(rng.integers(radius, h - radius))
        cell = ci * h + cj
        seed = _block_seed(moves, w, h, cell, radius)
        if np.any(q[seed] < 0):
            continue
        region = baseline_sets(graph, q, seed, eps=margin)
        dist = np.abs(cell_xy[moves[:, 1]] - cell_xy[cell]).sum(axis=1)
        far = np.flatnonzero(region & (dist >= min_dist))
        if len(far):
            source = int(np.flatnonzero(seed & (moves[:, 1] == cell))[0])
            return seed, source, int(far[rng.integers(len(far))])
    return None


def grid_world_from_q(w, h, q, rng, kernel=None, prior_mean=0.0, noise_std=0.01,
                      goal_margin=0.3, max_tries=200, step=1.0) -> Optional[GridMdpWorld]:
    graph, moves = augmented_grid(w, h, step)
    picked = _pick_seed_goal(graph, moves, w, h, q, rng, goal_margin, max_tries)
    if picked is None:
        return None
    seed, source, goal = picked
    return GridMdpWorld(graph, moves, w, h, q, seed, source, goal, kernel,
                        prior_mean, noise_std, step)


def sample_grid_world(w: int, h: int, rng: np.random.Generator,
                      kernel: Optional[KernelSpec] = None, mean: float = 0.6,
                      noise_std: float = 0.01, goal_margin: float = 0.3,
                      max_worlds: int = 50) -> GridMdpWorld:
    """Synthetic grid world with a GP-sampled move constraint.

    The constraint is drawn at move midpoints, so ``q(a -> b) == q(b -> a)``
    exactly. The seed holds every move inside a safe 3 x 3 block of cells.
    Goals are drawn from the region learnable with accuracy ``goal_margin``;
    a margin of a few epsilon keeps them reachable when certification relies
    on correlation with neighbouring observations.
    """
    if w < 3 or h < 3:
        raise ValueError("grid sides must be at least 3")
    kernel = kernel or KernelSpec('rbf', 2.0, 1.0)
    graph, moves = augmented_grid(w, h)
    pts = (2 * graph.points).astype(int)
    for _ in range(max_worlds):
        field_ = _lattice_sample(w, h, kernel, rng, mean)
        q = field_[pts[:, 0], pts[:, 1]]
        picked = _pick_seed_goal(graph, moves, w, h, q, rng, goal_margin, 200)
        if picked is not None:
            seed, source, goal = picked
            return GridMdpWorld(graph, moves, w, h, q, seed, source, goal, kernel,
                                mean, noise_std)
    raise RuntimeError("no world with a safe source-target pair")


# ------------------------------------------------------------- heightmaps

@dataclass
class HeightWorld:
    heights: np.ndarray
    step: float = 10.0
    max_slope_deg: float = 25.0
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec(
        'matern52', 30.0, math.tan(math.radians(10.0)) ** 2))
    noise_std: float = 0.01

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=float)
        w, h = self.heights.shape
        self.graph, self.moves = augmented_grid(w, h, self.step)
        flat = self.heights.ravel()
        slope = np.abs(flat[self.moves[:, 0]] - flat[self.moves[:, 1]]) / self.step
        self.true_q = math.tan(math.radians(self.max_slope_deg)) - slope

    @property
    def safe(self) -> np.ndarray:
        return self.true_q >= 0


def load_heightmap(path, **kwargs) -> HeightWorld:
    """Read a whitespace-separated grid of heights in meters, one row per line."""
    rows, width = [], None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = [float(v) for v in line.split()]
        except ValueError as err:
            raise ValueError(f"{path}:{lineno}: {err}") from None
        if not all(math.isfinite(v) for v in row):
            raise ValueError(f"{path}:{lineno}: non-finite height")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ValueError(f"{path}:{lineno}: expected {width} values, got {len(row)}")
        rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no heights")
    return HeightWorld(np.array(rows), **kwargs)


def height_world(hw: HeightWorld, rng: np.random.Generator, goal_margin: float = 0.05,
                 max_tries: int = 200) -> GridMdpWorld:
    """Grid world over a heightmap with a random source-target pair."""
    w, h = hw.heights.shape
    world = grid_world_from_q(w, h, hw.true_q, rng, hw.kernel, 0.0, hw.noise_std,
                              goal_margin, max_tries, hw.step)
    if world is None:
        raise RuntimeError("no safe source-target pair on this map")
    return world


# ------------------------------------------------------------------ paths

def _edge_arrays(graph: DecisionGraph, weights=None):
    uv = np.array(graph.edges, dtype=int).reshape(-1, 2)
    if weights is None:
        w = np.array([graph.cost[e] for e in graph.edges], dtype=float)
    else:
        w = np.asarray(weights, dtype=float)
    return uv[:, 0], uv[:, 1], w


def _restricted(n, u, v, w, within):
    keep = within[u] & within[v]
    return csr_matrix((w[keep], (u[keep], v[keep])), shape=(n, n))


def path_costs(graph: DecisionGraph, origin: int, within, reverse: bool = False,
               weights=None, edges=None) -> np.ndarray:
    """Min-cost from ``origin`` to every node (to ``origin`` when ``reverse``)."""
    within = np.asarray(within, dtype=bool).copy()
    out = np.full(graph.n, np.inf)
    out[origin] = 0.0
    if not within[origin]:
        return out
    u, v, w = edges if edges is not None else _edge_arrays(graph, weights)
    mat = _restricted(graph.n, u, v, w, within)
    if reverse:
        mat = mat.T.tocsr()
    return dijkstra(mat, directed=True, indices=origin)


def min_cost_path(graph: DecisionGraph, source: int, target: int, within=None):
    """Cheapest path from ``source`` to ``target`` using only nodes in ``within``.

    Returns
    -------
    cost : float
        ``inf`` when no such path exists.
    path : list of int
        Node sequence, empty when disconnected.
    """
    if source == target:
        return 0.0, [source]
    within = np.ones(graph.n, dtype=bool) if within is None \
        else np.asarray(within, dtype=bool)
    if not (within[source] and within[target]):
        return math.inf, []
    u, v, w = _edge_arrays(graph)
    mat = _restricted(graph.n, u, v, w, within)
    dist, pred = dijkstra(mat, directed=True, indices=source, return_predecessors=True)
    if not np.isfinite(dist[target]):
        return math.inf, []
    path = [target]
    while path[-1] != source:
        path.append(int(pred[path[-1]]))
    return float(dist[target]), path[::-1]


class PathHeuristic:
    """Optimistic cost of a safe path from ``source`` to ``goal`` through a node.

    Priority is ``-(min over predecessors x' of c(source, x', pess)
    + kappa * c(x, goal, domain))``, ``-inf`` when either leg is missing.
    """

    def __init__(self, graph: DecisionGraph, source: int, goal: int, kappa: float = 1.5):
        if not kappa > 1:
            raise ValueError("kappa must exceed 1")
        self.graph, self.source, self.goal, self.kappa = graph, source, goal, kappa
        self._edges = _edge_arrays(graph)

    def __call__(self, ctx) -> np.ndarray:
        u, v, w = self._edges
        from_start = path_costs(self.graph, self.source, ctx.pess, edges=self._edges)
        via_pred = np.full(self.graph.n, np.inf)
        np.minimum.at(via_pred, v, from_start[u])
        to_goal = path_costs(self.graph, self.goal, ctx.state.domain | ctx.pess,
                             reverse=True, edges=self._edges)
        with np.errstate(invalid='ignore'):
            return -(via_pred + self.kappa * to_goal)


class GoalDistanceHeuristic:
    """Negative min-cost path to the current goal within the oracle's domain.

    Edge costs are unit by default; ``metric=True`` uses the kernel metric
    between the endpoints of each edge.
    """

    def __init__(self, graph: DecisionGraph, kernel: Optional[KernelSpec] = None,
                 metric: bool = False):
        u, v, _ = _edge_arrays(graph)
        if metric:
            d = metric_matrix(kernel, graph.points)[u, v]
            # zero-length edges would vanish from the sparse matrix
            w = np.maximum(d, 1e-12)
        else:
            w = np.ones(len(u))
        self.graph = graph
        self._edges = (u, v, w)

    def __call__(self, ctx) -> np.ndarray:
        within = ctx.state.domain | ctx.pess
        return -path_costs(self.graph, ctx.goal, within, reverse=True, edges=self._edges)


# ---------------------------------------------------------------- metrics

def epsilon_safe_regret(world: BoWorld, nodes, eps: float):
    """Instantaneous and running-average regret against the best value in
    the epsilon-learnable region, one entry per evaluation.
    """
    region = baseline_sets(world.graph, world.true_q, world.seed, eps=eps)
    if not region.any():
        raise ValueError("empty learnable region")
    best = world.true_f[region].max()
    nodes = np.asarray(list(nodes), dtype=int)
    regret = np.maximum(best - world.true_f[nodes], 0.0)
    running = np.cumsum(regret) / np.arange(1, len(regret) + 1)
    return regret, running


def exploration_cost(world: GridMdpWorld, nodes, pess_history) -> float:
    """Travel cost of an agent that walks, inside the current safe set, from
    the start move to each evaluated move in turn.
    """
    here, total = world.source, 0.0
    for i, x in enumerate(nodes):
        cost, _ = min_cost_path(world.graph, here, int(x), pess_history[i])
        total += cost
        here = int(x)
    return total
