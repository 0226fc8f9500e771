"""Decision graph and the safe-set calculus.

Node sets are boolean masks over node indices. The closure operators work
on adjacency lists; the constraint-satisfaction operators come in two
flavours:

``lipschitz``
    a node is certified through the Lipschitz cone of some source node,
    ``bound(z) - L d(x, z) - margin >= 0``.
``direct``
    a node is certified by its own confidence bound, ``bound(x) - margin >= 0``;
    graph locality comes from the reachability part of the ergodicity
    operator.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

__all__ = ['DecisionGraph', 'reach_closure', 'return_closure', 'ergodic',
           'SetCalculus', 'pess_op', 'opt_op', 'pess_limit', 'opt_limit',
           'baseline_sets', 'read_graph', 'write_graph', 'chain_graph',
           'grid_graph']

MODES = ('lipschitz', 'direct')


class DecisionGraph:
    """Directed graph over embedded decision points.

    Parameters
    ----------
    points : array_like
        (n, d) embedding of the nodes; node ``i`` is ``points[i]``.
    edges : iterable of (int, int)
        Directed edges. Duplicates are dropped, first cost wins.
    costs : iterable of float, optional
        Positive cost per edge, default 1.
    """

    def __init__(self, points, edges, costs=None):
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points.reshape(-1, 1)
        self.points = points
        n = points.shape[0]
        edges = [(int(u), int(v)) for u, v in edges]
        costs = [1.0] * len(edges) if costs is None else [float(c) for c in costs]
        if len(costs) != len(edges):
            raise ValueError("one cost per edge required")
        self.succ: list[list[int]] = [[] for _ in range(n)]
        self.pred: list[list[int]] = [[] for _ in range(n)]
        self.cost: dict[tuple[int, int], float] = {}
        for (u, v), c in zip(edges, costs):
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u}, {v}) references a missing node")
            if not c > 0:
                raise ValueError(f"edge ({u}, {v}) has non-positive cost {c}")
            if (u, v) in self.cost:
                continue
            self.cost[(u, v)] = c
            self.succ[u].append(v)
            self.pred[v].append(u)
        self._succ_arr = [np.asarray(s, dtype=int) for s in self.succ]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.n

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(self.cost)

    def empty(self) -> np.ndarray:
        return np.zeros(self.n, dtype=bool)

    def mask(self, nodes) -> np.ndarray:
        m = self.empty()
        m[list(nodes)] = True
        return m

    def successors_of(self, s: np.ndarray) -> np.ndarray:
        """Mask of all one-hop successors of the nodes in ``s``."""
        out = self.empty()
        for u in np.flatnonzero(s):
            out[self._succ_arr[u]] = True
        return out

    def csr(self, weights: str = 'cost'):
        """Adjacency as a scipy CSR matrix (rows are edge tails)."""
        from scipy.sparse import csr_matrix
        if not self.cost:
            return csr_matrix((self.n, self.n))
        uv = np.array(list(self.cost), dtype=int)
        w = np.array(list(self.cost.values())) if weights == 'cost' \
            else np.ones(len(uv))
        return csr_matrix((w, (uv[:, 0], uv[:, 1])), shape=(self.n, self.n))


def _bfs(adj, sources: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    seen = sources.copy()
    queue = deque(np.flatnonzero(sources).tolist())
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if allowed[v] and not seen[v]:
                seen[v] = True
                queue.append(v)
    return seen


def reach_closure(g: DecisionGraph, s: np.ndarray,
                  within: Optional[np.ndarray] = None) -> np.ndarray:
    """Nodes reachable from ``s`` by forward edges, optionally staying in ``within``.

    The result always contains ``s``.
    """
    s = np.asarray(s, dtype=bool)
    allowed = np.ones(g.n, dtype=bool) if within is None else within | s
    return _bfs(g.succ, s, allowed)


def return_closure(g: DecisionGraph, within: np.ndarray,
                   target: np.ndarray) -> np.ndarray:
    """``target`` plus the nodes of ``within`` that reach it inside ``within``."""
    target = np.asarray(target, dtype=bool)
    return _bfs(g.pred, target, np.asarray(within, dtype=bool))


def ergodic(g: DecisionGraph, s: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Nodes reachable from ``base`` and able to return to it, both inside ``s``.

    Paths may pass through ``base`` itself.
    """
    s = np.asarray(s, dtype=bool)
    base = np.asarray(base, dtype=bool)
    return reach_closure(g, base, within=s) & return_closure(g, s, base)


@dataclass
class SetCalculus:
    """Constraint-satisfaction and expansion operators over one graph.

    Parameters
    ----------
    graph : DecisionGraph
    mode : {'direct', 'lipschitz'}
    lipschitz : float, optional
        Lipschitz constant, required in lipschitz mode.
    metric : ndarray, optional
        (n, n) kernel metric between nodes, required in lipschitz mode.
    epsilon : float
        Accuracy margin of the optimistic operator.
    """

    graph: DecisionGraph
    mode: str = 'direct'
    lipschitz: Optional[float] = None
    metric: Optional[np.ndarray] = field(default=None, repr=False)
    epsilon: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == 'lipschitz':
            if self.lipschitz is None or not self.lipschitz > 0:
                raise ValueError("lipschitz mode needs a positive constant")
            if self.metric is None:
                raise ValueError("lipschitz mode needs the kernel metric")
            self.metric = np.asarray(self.metric, dtype=float)

    def certify(self, bound: np.ndarray, src: np.ndarray,
                margin: float = 0.0) -> np.ndarray:
        """Nodes whose constraint is certified by ``bound`` from ``src``."""
        src = np.asarray(src, dtype=bool)
        if not src.any():
            return self.graph.empty()
        if self.mode == 'direct':
            return bound - margin >= 0
        z = np.flatnonzero(src)
        with np.errstate(invalid='ignore'):
            slack = bound[z, None] - self.lipschitz * self.metric[z] - margin
        return np.any(slack >= 0, axis=0)

    def pess_op(self, lower, src) -> np.ndarray:
        return self.certify(lower, src, 0.0)

    def opt_op(self, upper, src, epsilon: Optional[float] = None) -> np.ndarray:
        eps = self.epsilon if epsilon is None else epsilon
        return self.certify(upper, src, eps)

    def _limit(self, bound, base, margin) -> np.ndarray:
        base = np.asarray(base, dtype=bool)
        g = self.graph
        cur = base
        # Sources accumulate monotonically, so the certified set can be
        # grown from the newly added sources only.
        sources = base.copy()
        certified = self.certify(bound, sources, margin)
        for _ in range(g.n + 2):
            nxt = certified & ergodic(g, certified, base)
            if self.mode == 'direct':
                # certified does not depend on the sources: one step is the limit
                return nxt
            if np.array_equal(nxt, cur):
                return cur
            cur = nxt
            fresh = cur & ~sources
            if fresh.any():
                sources |= fresh
                if self.mode == 'lipschitz':
                    certified |= self.certify(bound, fresh, margin)
        raise RuntimeError("expansion did not reach a fixpoint")

    def pess_limit(self, lower, base) -> np.ndarray:
        """Limit of the n-step pessimistic expansion from ``base``."""
        return self._limit(lower, base, 0.0)

    def opt_limit(self, upper, base, epsilon: Optional[float] = None) -> np.ndarray:
        """Limit of the n-step optimistic expansion from ``base``."""
        eps = self.epsilon if epsilon is None else epsilon
        return self._limit(upper, base, eps)

    def pess_step(self, lower, base) -> np.ndarray:
        """One-step pessimistic expansion, certified set intersected with ergodic."""
        p = self.pess_op(lower, base)
        return p & ergodic(self.graph, p, base)

    def expanders(self, upper, candidates, targets) -> np.ndarray:
        """Candidates whose optimistic value could certify some target.

        Lipschitz mode: ``u(x) - L d(x, z) >= 0`` for a target ``z``. Direct mode:
        a target is a graph successor of ``x``.
        """
        candidates = np.asarray(candidates, dtype=bool)
        targets = np.asarray(targets, dtype=bool)
        out = self.graph.empty()
        if not candidates.any() or not targets.any():
            return out
        x = np.flatnonzero(candidates)
        if self.mode == 'lipschitz':
            z = np.flatnonzero(targets)
            with np.errstate(invalid='ignore'):
                slack = upper[x, None] - self.lipschitz * self.metric[np.ix_(x, z)]
            out[x] = np.any(slack >= 0, axis=1)
        else:
            arr = self.graph._succ_arr
            out[x] = [targets[arr[i]].any() for i in x]
        return out


def pess_op(calc: SetCalculus, lower, src):
    """Pessimistic constraint-satisfaction operator."""
    return calc.pess_op(lower, src)


def opt_op(calc: SetCalculus, upper, src, epsilon=None):
    """Optimistic constraint-satisfaction operator with accuracy margin."""
    return calc.opt_op(upper, src, epsilon)


def pess_limit(calc: SetCalculus, lower, base):
    return calc.pess_limit(lower, base)


def opt_limit(calc: SetCalculus, upper, base, epsilon=None):
    return calc.opt_limit(upper, base, epsilon)


def baseline_sets(g: DecisionGraph, true_q, seed, lipschitz: Optional[float] = None,
                  eps: float = 0.0, metric: Optional[np.ndarray] = None) -> np.ndarray:
    """Largest safe and ergodic set learnable from ``seed`` at accuracy ``eps``.

    Fixpoint of ``S -> R_safe(S) & ergodic(R_safe(S), S)`` where ``R_safe``
    adds nodes certified by the true constraint with margin ``eps``. Without
    a Lipschitz constant the direct rule ``q(x) - eps >= 0`` is used.
    """
    q = np.asarray(true_q, dtype=float)
    seed = np.asarray(seed, dtype=bool)
    if not seed.any():
        raise ValueError("seed set is empty")
    if np.any(q[seed] < 0):
        raise ValueError("seed set violates the constraint")
    if lipschitz is None:
        calc = SetCalculus(g, 'direct')
    else:
        calc = SetCalculus(g, 'lipschitz', lipschitz=lipschitz, metric=metric)
    cur = seed.copy()
    for _ in range(g.n + 2):
        safe = cur | calc.certify(q, cur, eps)
        nxt = safe & ergodic(g, safe, cur)
        if np.array_equal(nxt, cur):
            return cur
        cur = nxt
    raise RuntimeError("baseline did not reach a fixpoint")


def chain_graph(points, bidirectional: bool = True) -> DecisionGraph:
    """Nodes connected to their immediate neighbours along the index order."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    edges = [(i, i + 1) for i in range(n - 1)]
    if bidirectional:
        edges += [(i + 1, i) for i in range(n - 1)]
    return DecisionGraph(points, edges)


def grid_graph(nx: int, ny: int, points=None) -> DecisionGraph:
    """4-connected bidirectional grid; node index is ``i * ny + j``."""
    if points is None:
        xs, ys = np.meshgrid(np.arange(nx), np.arange(ny), indexing='ij')
        points = np.column_stack([xs.ravel(), ys.ravel()]).astype(float)
    edges = []
    for i in range(nx):
        for j in range(ny):
            a = i * ny + j
            if i + 1 < nx:
                edges += [(a, a + ny), (a + ny, a)]
            if j + 1 < ny:
                edges += [(a, a + 1), (a + 1, a)]
    return DecisionGraph(points, edges)


def write_graph(g: DecisionGraph, edge_path, node_path, q=None):
    """Write the edge list ``u v cost [q_v]`` and the node table ``id x1 .. xd``."""
    with open(edge_path, 'w', newline='\n') as f:
        for (u, v), c in g.cost.items():
            row = f"{u} {v} {c!r}"
            if q is not None:
                row += f" {float(q[v])!r}"
            f.write(row + '\n')
    with open(node_path, 'w', newline='\n') as f:
        for i, p in enumerate(g.points):
            f.write(' '.join([str(i)] + [repr(float(x)) for x in p]) + '\n')


def _records(path):
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if parts and not parts[0].startswith('#'):
            yield lineno, parts


def read_graph(edge_path, node_path) -> DecisionGraph:
    """Read a graph written by :func:`write_graph`."""
    coords = {}
    for lineno, parts in _records(node_path):
        try:
            coords[int(parts[0])] = [float(x) for x in parts[1:]]
        except ValueError as err:
            raise ValueError(f"{node_path}:{lineno}: {err}") from None
    n = len(coords)
    if sorted(coords) != list(range(n)):
        raise ValueError(f"{node_path}: node ids must be dense 0..{n - 1}")
    edges, costs = [], []
    for lineno, parts in _records(edge_path):
        if len(parts) < 3:
            raise ValueError(f"{edge_path}:{lineno}: expected 'u v cost'")
        try:
            edges.append((int(parts[0]), int(parts[1])))
            costs.append(float(parts[2]))
        except ValueError as err:
            raise ValueError(f"{edge_path}:{lineno}: {err}") from None
    return DecisionGraph([coords[i] for i in range(n)], edges, costs)
