"""Oracles for the engine and the safe-exploration baselines."""

from __future__ import annotations

import time
from typing import Optional

import numpy as np

from .engine import (GooseConfig, OracleExhausted, RunContext, RunTrace,
                     constant_heuristic, make_calculus, run, _check_seed)
from .gp import BetaSchedule, ConfidenceState, PosteriorModel, update_bounds
from .graph import DecisionGraph, SetCalculus

__all__ = ['UcbOracle', 'GoalOracle', 'ExplorationOracle', 'ucb_suggest',
           'safeopt_step', 'stageopt_step', 'run_safeopt', 'run_stageopt',
           'smdp_runner', 'boundary_sampling_reference', 'Converged']


class Converged(Exception):
    """Every candidate of a baseline is already known to epsilon accuracy."""


def _argmax_in(values, mask) -> int:
    idx = np.flatnonzero(mask)
    if not len(idx):
        raise ValueError("empty domain")
    return int(idx[np.argmax(values[idx])])


class UcbOracle:
    """GP-UCB over the supplied domain.

    With ``shared=True`` the model is also the constraint model and is fed by
    the engine, so :meth:`notify` does not append the observation again.
    """

    def __init__(self, model: PosteriorModel, beta: Optional[BetaSchedule] = None,
                 shared: bool = False):
        self.model = model
        self.beta = beta if beta is not None else BetaSchedule()
        self.shared = shared

    def acquisition(self) -> np.ndarray:
        mean, var = self.model.domain_moments()
        return mean + self.beta.scale(self.model.t + 1, self.model) * np.sqrt(var)

    def suggest(self, domain, ctx: Optional[RunContext] = None) -> int:
        return _argmax_in(self.acquisition(), np.asarray(domain, dtype=bool))

    def notify(self, node: int, value: float) -> None:
        if not self.shared:
            self.model.add_observation(None, value, index=node)


def ucb_suggest(oracle: UcbOracle, domain) -> int:
    return oracle.suggest(domain)


class GoalOracle:
    """Always proposes a fixed goal while it is in the domain."""

    def __init__(self, goal: int):
        self.goal = int(goal)

    def suggest(self, domain, ctx=None) -> int:
        if not domain[self.goal]:
            raise OracleExhausted(f"goal {self.goal} left the domain")
        return self.goal

    def notify(self, node, value):
        pass


class ExplorationOracle:
    """Proposes the lowest-index domain node that is not yet certified safe.

    Used for pure exploration, so the engine never evaluates the objective at
    its suggestions.
    """

    evaluates_objective = False

    def suggest(self, domain, ctx: RunContext) -> int:
        idx = np.flatnonzero(np.asarray(domain, dtype=bool) & ~ctx.pess)
        if not len(idx):
            raise OracleExhausted("domain is certified")
        return int(idx[0])

    def notify(self, node, value):
        pass


def smdp_runner(graph: DecisionGraph, seed, constraint_env, model: PosteriorModel,
                cfg: GooseConfig, goal: Optional[int] = None) -> RunTrace:
    """Boundary uncertainty sampling, i.e. the engine with a constant heuristic.

    Without a goal the whole reachable safe set is explored; with one the run
    ends as soon as the goal is certified.
    """
    oracle = ExplorationOracle() if goal is None else GoalOracle(goal)
    return run(graph, seed, oracle, constant_heuristic, constraint_env, model, cfg,
               stop_node=goal)


def boundary_sampling_reference(graph: DecisionGraph, seed, constraint_env,
                                model: PosteriorModel, cfg: GooseConfig,
                                goal: int) -> list[int]:
    """Plain boundary uncertainty sampling until ``goal`` is certified.

    Written without the engine's priority machinery; returns the sequence of
    evaluated nodes.
    """
    calc = make_calculus(graph, cfg, model.kernel)
    seed = np.asarray(seed, dtype=bool)
    bounds = update_bounds(ConfidenceState.initial(graph.n, seed), model, cfg.beta,
                           model.t + 1)
    pess = seed | calc.pess_limit(bounds.lower, seed)
    opt = calc.opt_limit(bounds.upper, pess)
    visited = []
    while not pess[goal]:
        if not (opt[goal] or pess[goal]):
            break
        if cfg.max_evals is not None and len(visited) >= cfg.max_evals:
            break
        lower, upper = bounds.lower, bounds.upper
        certified = calc.pess_op(lower, pess)
        outside = [z for z in range(graph.n) if opt[z] and not certified[z]]
        best, best_w = None, -np.inf
        for x in range(graph.n):
            w = upper[x] - lower[x]
            if not pess[x] or not w > calc.epsilon:
                continue
            if calc.mode == 'lipschitz':
                useful = any(upper[x] - calc.lipschitz * calc.metric[x, z] >= 0
                             for z in outside)
            else:
                useful = any(opt[z] and not certified[z] for z in graph.succ[x])
            if useful and w > best_w:
                best, best_w = x, w
        if best is None:
            break
        y = constraint_env(best)
        visited.append(best)
        model.add_observation(None, y, index=best)
        bounds = update_bounds(bounds, model, cfg.beta, model.t + 1)
        pess, opt = calc.pess_limit(bounds.lower, pess), calc.opt_limit(bounds.upper, pess)
    return visited


def _uncertain_expanders(calc: SetCalculus, pess, opt, bounds: ConfidenceState):
    certified = calc.pess_op(bounds.lower, pess)
    targets = opt & ~certified
    uncertain = pess & (bounds.width > calc.epsilon)
    return calc.expanders(bounds.upper, uncertain, targets)


def safeopt_step(calc: SetCalculus, pess, opt, bounds: ConfidenceState) -> int:
    """Most uncertain node among potential maximizers and expanders.

    Raises
    ------
    Converged
        When no candidate is wider than epsilon.
    """
    if not pess.any():
        raise ValueError("safe set is empty")
    best_lower = bounds.lower[pess].max()
    maximizers = pess & (bounds.upper >= best_lower)
    candidates = (maximizers & (bounds.width > calc.epsilon)) \
        | _uncertain_expanders(calc, pess, opt, bounds)
    if not candidates.any():
        raise Converged()
    return _argmax_in(bounds.width, candidates)


def stageopt_step(calc: SetCalculus, pess, opt, bounds: ConfidenceState,
                  oracle: UcbOracle, t: int, t1: int) -> int:
    """Expansion by uncertainty sampling up to step ``t1``, then safe UCB.

    The expansion stage ends early once no expander is left.
    """
    if not pess.any():
        raise ValueError("safe set is empty")
    if t <= t1:
        expanders = _uncertain_expanders(calc, pess, opt, bounds)
        if expanders.any():
            return _argmax_in(bounds.width, expanders)
    return oracle.suggest(pess)


def _run_baseline(select, graph, seed, constraint_env, model, cfg: GooseConfig,
                  budget: int) -> RunTrace:
    seed = np.asarray(seed, dtype=bool)
    _check_seed(graph, seed, constraint_env)
    calc = make_calculus(graph, cfg, model.kernel)
    true_q = getattr(constraint_env, 'values', None)
    bounds = update_bounds(ConfidenceState.initial(graph.n, seed), model, cfg.beta,
                           model.t + 1)
    pess = seed | calc.pess_limit(bounds.lower, seed)
    opt = calc.opt_limit(bounds.upper, pess)
    trace = RunTrace()
    for step in range(1, budget + 1):
        start = time.perf_counter()
        x = select(calc, pess, opt, bounds, step)
        if not pess[x]:
            raise AssertionError(f"node {x} evaluated outside the safe set")
        if true_q is not None and true_q[x] < 0:
            trace.violations.append((x, float(true_q[x])))
        y = constraint_env(x)
        model.add_observation(None, y, index=x)
        bounds = update_bounds(bounds, model, cfg.beta, model.t + 1)
        pess, opt = calc.pess_limit(bounds.lower, pess), calc.opt_limit(bounds.upper, pess)
        trace.objective_evals.append((step, x, y))
        trace.evaluations.append(('objective', x, y))
        trace.step_times.append(time.perf_counter() - start)
        trace.set_sizes.append((int(pess.sum()), int(opt.sum())))
        if true_q is not None:
            trace.bounds_valid.append(bool(np.all(bounds.lower <= true_q)
                                           and np.all(true_q <= bounds.upper)))
    return trace


def run_safeopt(graph, seed, constraint_env, model: PosteriorModel, cfg: GooseConfig,
                budget: int) -> RunTrace:
    """SafeOpt-style run with a shared objective and constraint (f = q).

    After convergence the node with the best lower bound is evaluated.
    """
    def select(calc, pess, opt, bounds, step):
        try:
            return safeopt_step(calc, pess, opt, bounds)
        except Converged:
            return _argmax_in(bounds.lower, pess)
    return _run_baseline(select, graph, seed, constraint_env, model, cfg, budget)


def run_stageopt(graph, seed, constraint_env, model: PosteriorModel, cfg: GooseConfig,
                 budget: int, t1: Optional[int] = None) -> RunTrace:
    """StageOpt-style run with f = q; ``t1`` defaults to half the budget."""
    t1 = budget // 2 if t1 is None else t1
    oracle = UcbOracle(model, cfg.beta, shared=True)

    def select(calc, pess, opt, bounds, step):
        return stageopt_step(calc, pess, opt, bounds, oracle, step, t1)
    return _run_baseline(select, graph, seed, constraint_env, model, cfg, budget)
