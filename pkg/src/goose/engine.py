"""Goal-oriented safe exploration around an arbitrary oracle.

The oracle proposes decisions inside the optimistic safe set. A proposal is
evaluated only once it is certified safe; until then the engine learns about
the constraint by sampling safe, still-uncertain nodes that could certify the
highest-priority uncertain targets.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from .gp import BetaSchedule, ConfidenceState, PosteriorModel, metric_matrix, update_bounds
from .graph import DecisionGraph, SetCalculus, reach_closure

__all__ = ['GooseConfig', 'SafeSetState', 'RunContext', 'RunTrace', 'NoisyFunction',
           'Oracle', 'OracleExhausted', 'run', 'safe_expand_step', 'handle_stall',
           'sample_bound', 'constant_heuristic', 'make_calculus']

logger = logging.getLogger(__name__)


class OracleExhausted(Exception):
    """The oracle has nothing left to suggest in the given domain."""


class Oracle(Protocol):
    def suggest(self, domain: np.ndarray, ctx: 'RunContext') -> int: ...

    def notify(self, node: int, value: float) -> None: ...


@dataclass
class GooseConfig:
    """Run parameters.

    ``max_evals`` caps constraint plus objective evaluations, the shared axis
    on which safe-BO runs are compared.
    """

    epsilon: float = 0.1
    beta: BetaSchedule = field(default_factory=BetaSchedule)
    mode: str = 'direct'
    lipschitz: Optional[float] = None
    kappa: float = 1.5
    max_evals: Optional[int] = None
    max_constraint_evals: Optional[int] = None
    max_objective_evals: Optional[int] = None
    record_sets: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.kappa > 1:
            raise ValueError("kappa must exceed 1")
        if self.mode not in ('direct', 'lipschitz'):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == 'lipschitz' and not (self.lipschitz or 0) > 0:
            raise ValueError("lipschitz mode needs a positive lipschitz constant")


def make_calculus(graph: DecisionGraph, cfg: GooseConfig, kernel=None) -> SetCalculus:
    metric = None
    if cfg.mode == 'lipschitz':
        metric = metric_matrix(kernel, graph.points)
    return SetCalculus(graph, cfg.mode, cfg.lipschitz, metric, cfg.epsilon)


@dataclass
class SafeSetState:
    """Pessimistic and optimistic safe sets plus the oracle's removals."""

    pess: np.ndarray
    opt: np.ndarray
    seed: np.ndarray
    removed: np.ndarray

    @property
    def domain(self) -> np.ndarray:
        """Decisions the oracle may propose."""
        return (self.opt | self.pess) & ~self.removed


@dataclass
class RunContext:
    """Read-only view handed to oracles and heuristics."""

    graph: DecisionGraph
    state: SafeSetState
    bounds: ConfidenceState
    goal: Optional[int]
    t: int

    @property
    def pess(self):
        return self.state.pess

    @property
    def opt(self):
        return self.state.opt


def constant_heuristic(ctx: RunContext) -> np.ndarray:
    """Uninformative priority, h = 1 everywhere."""
    return np.ones(ctx.graph.n)


@dataclass
class RunTrace:
    constraint_evals: list = field(default_factory=list)   # (t, node, value)
    objective_evals: list = field(default_factory=list)    # (k, node, value)
    evaluations: list = field(default_factory=list)        # (kind, node, value)
    set_sizes: list = field(default_factory=list)          # (|pess|, |opt|)
    step_times: list = field(default_factory=list)
    violations: list = field(default_factory=list)         # (node, true q)
    bounds_valid: list = field(default_factory=list)
    pess_history: list = field(default_factory=list)
    opt_history: list = field(default_factory=list)
    suggestions: list = field(default_factory=list)
    removed: list = field(default_factory=list)
    first_goal_step: Optional[int] = None
    truncated: bool = False

    @property
    def safe(self) -> bool:
        return not self.violations

    @property
    def constraint_nodes(self) -> list[int]:
        return [node for _, node, _ in self.constraint_evals]


class NoisyFunction:
    """Node-indexed function observed with additive Gaussian noise."""

    def __init__(self, values, noise_std: float, rng: np.random.Generator):
        self.values = np.asarray(values, dtype=float)
        self.noise_std = float(noise_std)
        self.rng = rng

    def __call__(self, node: int) -> float:
        return float(self.values[node] + self.noise_std * self.rng.standard_normal())


def _check_seed(graph: DecisionGraph, seed: np.ndarray, env):
    if not seed.any():
        raise ValueError("seed set is empty")
    first = np.flatnonzero(seed)[0]
    if not reach_closure(graph, graph.mask([first]), within=seed)[seed].all():
        raise ValueError("seed set is not connected within itself")
    for x in np.flatnonzero(seed):
        if not reach_closure(graph, graph.mask([x]), within=seed)[first]:
            raise ValueError("seed set is not connected within itself")
    values = getattr(env, 'values', None)
    if values is not None and np.any(values[seed] < 0):
        raise ValueError("seed set violates the safety constraint")


def safe_expand_step(calc: SetCalculus, state: SafeSetState, bounds: ConfidenceState,
                     heuristic: Callable[[RunContext], np.ndarray],
                     ctx: RunContext) -> Optional[int]:
    """Select the next constraint evaluation, or ``None`` when stalled.

    Uncertain safe nodes (width above epsilon) that could certify an
    uncertain target of the highest feasible priority are candidates; the
    widest wins, ties to the lowest index.
    """
    width = bounds.width
    uncertain = state.pess & (width > calc.epsilon)
    if not uncertain.any():
        return None
    certified = calc.pess_op(bounds.lower, state.pess)
    targets = state.opt & ~state.removed & ~certified
    if not targets.any():
        return None
    priority = np.asarray(heuristic(ctx), dtype=float)
    has, best = _best_target_priority(calc, bounds.upper, uncertain, targets, priority)
    if not has.any():
        return None
    alpha = best[has].max()
    expanders = np.flatnonzero(has & (best == alpha))
    return int(expanders[np.argmax(width[expanders])])


def _best_target_priority(calc, upper, candidates, targets, priority):
    """For each candidate: whether it can certify a target, and the best such priority."""
    n = calc.graph.n
    has = np.zeros(n, dtype=bool)
    best = np.full(n, -np.inf)
    x = np.flatnonzero(candidates)
    if calc.mode == 'lipschitz':
        z = np.flatnonzero(targets)
        with np.errstate(invalid='ignore'):
            ok = upper[x, None] - calc.lipschitz * calc.metric[np.ix_(x, z)] >= 0
        has[x] = ok.any(axis=1)
        prio = np.where(ok, priority[z][None, :], -np.inf)
        best[x] = prio.max(axis=1) if len(z) else -np.inf
    else:
        succ = calc.graph._succ_arr
        for i in x:
            nb = succ[i]
            nb = nb[targets[nb]]
            if len(nb):
                has[i] = True
                best[i] = priority[nb].max()
    return has, best


def handle_stall(state: SafeSetState, goal: int) -> np.ndarray:
    """Drop an unlearnable goal from the oracle's domain."""
    state.removed[goal] = True
    return state.domain


def run(graph: DecisionGraph, seed, oracle: Oracle, heuristic, constraint_env,
        model: PosteriorModel, cfg: GooseConfig, objective_env=None,
        stop_node: Optional[int] = None) -> RunTrace:
    """Run the safe exploration loop around ``oracle``.

    Parameters
    ----------
    graph : DecisionGraph
    seed : array_like of bool
        Initial safe set; must be non-empty, safe and internally connected.
    oracle : Oracle
    heuristic : callable
        Maps a :class:`RunContext` to per-node priorities.
    constraint_env : callable
        ``constraint_env(node)`` returns a noisy constraint observation.
    model : PosteriorModel
        Constraint model with ``domain == graph.points``; may hold prior data.
    cfg : GooseConfig
    objective_env : callable, optional
        Noisy objective. When omitted the objective is the constraint itself
        and objective evaluations also update the constraint model.
    stop_node : int, optional
        End the run as soon as this node is certified safe.
    """
    seed = np.asarray(seed, dtype=bool)
    _check_seed(graph, seed, constraint_env)
    calc = make_calculus(graph, cfg, model.kernel)
    true_q = getattr(constraint_env, 'values', None)
    shared = objective_env is None

    bounds = ConfidenceState.initial(graph.n, seed)
    bounds = update_bounds(bounds, model, cfg.beta, model.t + 1)
    # prior observations may already certify more than the seed
    pess = seed | calc.pess_limit(bounds.lower, seed)
    state = SafeSetState(pess, calc.opt_limit(bounds.upper, pess), seed.copy(),
                         graph.empty())
    trace = RunTrace()
    counts = {'t': 0, 'k': 0}

    def record_sets():
        trace.set_sizes.append((int(state.pess.sum()), int(state.opt.sum())))
        if cfg.record_sets:
            trace.pess_history.append(state.pess.copy())
            trace.opt_history.append(state.opt.copy())
        if true_q is not None:
            trace.bounds_valid.append(bool(np.all(bounds.lower <= true_q)
                                           and np.all(true_q <= bounds.upper)))

    def learn(node, value):
        nonlocal bounds
        model.add_observation(None, value, index=node)
        bounds = update_bounds(bounds, model, cfg.beta, model.t + 1)
        prev = state.pess
        state.pess = calc.pess_limit(bounds.lower, prev)
        state.opt = calc.opt_limit(bounds.upper, prev)

    def check_safe(node):
        if not state.pess[node]:
            raise AssertionError(f"node {node} evaluated outside the safe set")
        if true_q is not None and true_q[node] < 0:
            trace.violations.append((int(node), float(true_q[node])))

    def budget_left(kind):
        total = counts['t'] + counts['k']
        if cfg.max_evals is not None and total >= cfg.max_evals:
            return False
        if kind == 't' and cfg.max_constraint_evals is not None:
            return counts['t'] < cfg.max_constraint_evals
        if kind == 'k' and cfg.max_objective_evals is not None:
            return counts['k'] < cfg.max_objective_evals
        return True

    def goal_reached():
        if stop_node is not None and state.pess[stop_node]:
            if trace.first_goal_step is None:
                trace.first_goal_step = counts['t']
            return True
        return False

    record_sets()
    done = goal_reached()
    while not done:
        if not budget_left('k') and not budget_left('t'):
            trace.truncated = True
            break
        domain = state.domain
        ctx = RunContext(graph, state, bounds, None, counts['t'])
        try:
            goal = int(oracle.suggest(domain.copy(), ctx))
        except OracleExhausted:
            break
        if not domain[goal]:
            raise ValueError(f"oracle suggested {goal} outside its domain")
        trace.suggestions.append(goal)

        while not state.pess[goal]:
            if not budget_left('t'):
                trace.truncated = True
                done = True
                break
            start = time.perf_counter()
            ctx = RunContext(graph, state, bounds, goal, counts['t'])
            x = safe_expand_step(calc, state, bounds, heuristic, ctx)
            if x is None:
                handle_stall(state, goal)
                trace.removed.append(goal)
                logger.debug("stalled on goal %d; removed from domain", goal)
                break
            check_safe(x)
            y = constraint_env(x)
            counts['t'] += 1
            learn(x, y)
            trace.constraint_evals.append((counts['t'], int(x), y))
            trace.evaluations.append(('constraint', int(x), y))
            trace.step_times.append(time.perf_counter() - start)
            record_sets()
            if goal_reached():
                done = True
                break
            if not state.domain[goal]:
                break
        if done or not state.pess[goal]:
            continue
        if not getattr(oracle, 'evaluates_objective', True):
            continue

        if not budget_left('k'):
            trace.truncated = cfg.max_objective_evals is None
            break
        start = time.perf_counter()
        check_safe(goal)
        y = (constraint_env if shared else objective_env)(goal)
        counts['k'] += 1
        if shared:
            learn(goal, y)
        oracle.notify(goal, y)
        trace.objective_evals.append((counts['k'], goal, y))
        trace.evaluations.append(('objective', goal, y))
        trace.step_times.append(time.perf_counter() - start)
        if shared:
            record_sets()
            done = goal_reached()
    return trace


def sample_bound(bound: float, sigma: float, delta: float,
                 gamma_fn: Callable[[int], float], region_size: int, eps: float,
                 max_iter: int = 10 ** 7) -> int:
    """Smallest t with t / (beta_t gamma_t) >= C |R| / eps^2, C = 8 / log(1 + sigma^-2)."""
    if not (bound > 0 and sigma > 0 and eps > 0 and region_size > 0):
        raise ValueError("parameters must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    c = 8.0 / math.log(1.0 + sigma ** -2)
    rhs = c * region_size / eps ** 2
    log_term = 1.0 + math.log(1.0 / delta)
    for t in range(1, max_iter + 1):
        gamma = float(gamma_fn(t))
        beta = (bound + 4.0 * sigma * math.sqrt(gamma + log_term)) ** 2
        if gamma <= 0 or t >= rhs * beta * gamma:
            return t
    raise OverflowError(f"no t <= {max_iter} satisfies the sample bound")
