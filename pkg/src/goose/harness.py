"""Seeded experiment driver: configuration, runs, metrics and CSV output."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .engine import GooseConfig, NoisyFunction, RunTrace, run
from .gp import BetaSchedule, PosteriorModel
from .oracles import GoalOracle, UcbOracle, run_safeopt, run_stageopt, smdp_runner
from .worlds import (GoalDistanceHeuristic, PathHeuristic, epsilon_safe_regret,
                     exploration_cost, height_world, load_heightmap, sample_gp_world,
                     sample_grid_world)

logger = logging.getLogger(__name__)

BO_EXPERIMENTS = ('safe-bo-1d', 'safe-bo-2d')
PATH_EXPERIMENTS = ('safe-path-synthetic', 'safe-path-heightmap')
EXPERIMENTS = BO_EXPERIMENTS + PATH_EXPERIMENTS
BO_ALGORITHMS = ('goose', 'safeopt', 'stageopt')
PATH_ALGORITHMS = ('goose', 'smdp')


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    experiment: str
    algorithms: tuple = ()
    seeds: int = 0
    master_seed: int = 0
    budget: int = 0
    epsilon: Optional[float] = None
    beta: float = 3.0
    mode: str = 'direct'
    lipschitz: Optional[float] = None
    kappa: float = 1.5
    noise_std: float = 0.01
    world_sizes: tuple = (15,)
    goal_margin: Optional[float] = None
    stageopt_t1: Optional[int] = None
    heightmap: Optional[str] = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        bo = self.experiment in BO_EXPERIMENTS
        allowed = BO_ALGORITHMS if bo else PATH_ALGORITHMS
        if not self.algorithms:
            self.algorithms = allowed
        self.algorithms = tuple(self.algorithms)
        bad = [a for a in self.algorithms if a not in allowed]
        if bad:
            raise ConfigError(f"algorithms {bad} not available for {self.experiment}")
        if not self.seeds:
            self.seeds = {'safe-bo-1d': 10, 'safe-bo-2d': 5}.get(self.experiment, 10)
        if not self.budget:
            self.budget = 150 if bo else 2000
        if self.seeds < 0 or self.budget <= 0:
            raise ConfigError("seeds and budget must be positive")
        if self.experiment == 'safe-path-heightmap' and not self.heightmap:
            raise ConfigError("safe-path-heightmap needs a heightmap file")
        if any(s < 3 for s in self.world_sizes):
            raise ConfigError("world sizes must be at least 3")
        try:
            self.goose_config()
        except ValueError as err:
            raise ConfigError(str(err)) from None

    @property
    def prior_std(self) -> float:
        if self.experiment == 'safe-path-heightmap':
            return math.tan(math.radians(10.0))
        return 1.0

    def goose_config(self, **kw) -> GooseConfig:
        eps = self.epsilon if self.epsilon is not None else 0.1 * self.prior_std
        return GooseConfig(epsilon=eps, beta=BetaSchedule.constant(self.beta),
                           mode=self.mode, lipschitz=self.lipschitz, kappa=self.kappa,
                           **kw)


def _parse_value(name, text):
    kind = {f.name: f.type for f in fields(ExperimentConfig)}[name]
    if name in ('algorithms',):
        return tuple(v.strip() for v in text.split(',') if v.strip())
    if name == 'world_sizes':
        return tuple(int(v) for v in text.split(',') if v.strip())
    if text.lower() == 'none' and 'Optional' in str(kind):
        return None
    if 'int' in str(kind):
        return int(text)
    if 'float' in str(kind):
        return float(text)
    return text


def parse_config(path) -> ExperimentConfig:
    """Read ``key = value`` lines; ``#`` starts a comment.

    Unknown keys and malformed values raise :class:`ConfigError` with the
    line number. A repeated key overrides the earlier one with a warning.
    """
    names = {f.name for f in fields(ExperimentConfig)}
    values, where = {}, {}
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"{path}: {err.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split('=', 1))
        key = key.replace('-', '_')
        if key not in names:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            parsed = _parse_value(key, value)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
        if key in values:
            logger.warning("%s:%d: %s repeated, overriding line %d", path, lineno, key,
                           where[key])
        values[key], where[key] = parsed, lineno
    if 'experiment' not in values:
        raise ConfigError(f"{path}: missing required key 'experiment'")
    return ExperimentConfig(**values)


def format_config(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config`."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ', '.join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return '\n'.join(lines) + '\n'


@dataclass
class MetricsReport:
    experiment: str
    step_rows: list = field(default_factory=list)
    run_rows: list = field(default_factory=list)
    summary_rows: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    @property
    def safe(self) -> bool:
        return not self.violations


STEP_COLUMNS = {
    'bo': ['algorithm', 'seed', 'step', 'node', 'kind', 'regret', 'avg_regret'],
    'path': ['algorithm', 'world_size', 'seed', 'step', 'node', 'pess_size', 'opt_size'],
}
RUN_COLUMNS = {
    'bo': ['algorithm', 'seed', 'evaluations', 'final_avg_regret', 'violations'],
    'path': ['algorithm', 'world_size', 'seed', 'samples_to_first_path', 'found',
             'exploration_cost', 'violations'],
}
SUMMARY_COLUMNS = {
    'bo': ['algorithm', 'step', 'mean_avg_regret', 'stderr_avg_regret'],
    'path': ['algorithm', 'world_size', 'samples_ratio', 'cost_ratio'],
}


def _rngs(master: int, seed: int):
    world = np.random.default_rng([master, seed, 0])
    return world, lambda: np.random.default_rng([master, seed, 1])


def _bo_run(alg, world, noise_rng, cfg: ExperimentConfig) -> RunTrace:
    env = NoisyFunction(world.true_q, world.noise_std, noise_rng)
    model = PosteriorModel(world.kernel, world.noise_std, world.graph.points)
    # the seed observation initializes every algorithm and is not counted
    for x in np.flatnonzero(world.seed):
        model.add_observation(None, env(x), index=x)
    gcfg = cfg.goose_config(max_evals=cfg.budget)
    if alg == 'goose':
        oracle = UcbOracle(model, gcfg.beta, shared=True)
        return run(world.graph, world.seed, oracle, GoalDistanceHeuristic(world.graph),
                   env, model, gcfg)
    if alg == 'safeopt':
        return run_safeopt(world.graph, world.seed, env, model, gcfg, cfg.budget)
    return run_stageopt(world.graph, world.seed, env, model, gcfg, cfg.budget,
                        cfg.stageopt_t1)


def _run_bo(cfg: ExperimentConfig, report: MetricsReport):
    dim = 1 if cfg.experiment == 'safe-bo-1d' else 2
    eps = cfg.goose_config().epsilon
    series = {a: [] for a in cfg.algorithms}
    for seed in range(cfg.seeds):
        world_rng, noise = _rngs(cfg.master_seed, seed)
        world = sample_gp_world(dim, world_rng, noise_std=cfg.noise_std)
        for alg in cfg.algorithms:
            start = time.perf_counter()
            trace = _bo_run(alg, world, noise(), cfg)
            report.timing.setdefault(alg, []).extend(trace.step_times)
            logger.info("%s seed %d: %.2fs", alg, seed, time.perf_counter() - start)
            nodes = [n for _, n, _ in trace.evaluations]
            regret, avg = epsilon_safe_regret(world, nodes, eps)
            series[alg].append(avg)
            for step, ((kind, node, _), r, a) in enumerate(
                    zip(trace.evaluations, regret, avg), 1):
                report.step_rows.append([alg, seed, step, node, kind, float(r), float(a)])
            report.run_rows.append([alg, seed, len(nodes),
                                    float(avg[-1]) if len(avg) else math.nan,
                                    len(trace.violations)])
            report.violations += [(alg, seed, v) for v in trace.violations]
    for alg, runs in series.items():
        for step in range(1, cfg.budget + 1):
            vals = np.array([r[step - 1] for r in runs if len(r) >= step])
            if not len(vals):
                break
            err = vals.std(ddof=1) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0
            report.summary_rows.append([alg, step, float(vals.mean()), float(err)])


def path_world(cfg: ExperimentConfig, size: int, rng):
    margin = cfg.goal_margin
    if cfg.experiment == 'safe-path-heightmap':
        hw = load_heightmap(cfg.heightmap, noise_std=cfg.noise_std)
        eps = cfg.goose_config().epsilon
        return height_world(hw, rng, 3 * eps if margin is None else margin)
    eps = cfg.goose_config().epsilon
    return sample_grid_world(size, size, rng, noise_std=cfg.noise_std,
                             goal_margin=3 * eps if margin is None else margin)


def path_run(alg, world, noise_rng, cfg: ExperimentConfig) -> RunTrace:
    env = NoisyFunction(world.true_q, world.noise_std, noise_rng)
    model = PosteriorModel(world.kernel, world.noise_std, world.graph.points,
                           prior_mean=world.prior_mean)
    gcfg = cfg.goose_config(max_evals=cfg.budget, record_sets=True)
    if alg == 'smdp':
        return smdp_runner(world.graph, world.seed, env, model, gcfg, goal=world.goal)
    heuristic = PathHeuristic(world.graph, world.source, world.goal, cfg.kappa)
    return run(world.graph, world.seed, GoalOracle(world.goal), heuristic, env, model,
               gcfg, stop_node=world.goal)


def _geomean(x):
    x = np.asarray(x, dtype=float)
    return float(np.exp(np.mean(np.log(x)))) if len(x) else math.nan


def _run_path(cfg: ExperimentConfig, report: MetricsReport):
    sizes = (0,) if cfg.experiment == 'safe-path-heightmap' else cfg.world_sizes
    for size in sizes:
        per_seed = {}
        for seed in range(cfg.seeds):
            world_rng, noise = _rngs(cfg.master_seed, seed * 1000 + size)
            world = path_world(cfg, size, world_rng)
            for alg in cfg.algorithms:
                trace = path_run(alg, world, noise(), cfg)
                report.timing.setdefault(alg, []).extend(trace.step_times)
                nodes = trace.constraint_nodes
                for step, (x, (p, o)) in enumerate(zip(nodes, trace.set_sizes[1:]), 1):
                    report.step_rows.append([alg, size, seed, step, x, p, o])
                found = trace.first_goal_step is not None
                samples = trace.first_goal_step if found else len(nodes)
                cost = exploration_cost(world, nodes, trace.pess_history)
                report.run_rows.append([alg, size, seed, samples, int(found), cost,
                                        len(trace.violations)])
                report.violations += [(alg, seed, v) for v in trace.violations]
                per_seed[(alg, seed)] = (samples, cost, found)
        if 'smdp' not in cfg.algorithms:
            continue
        for alg in cfg.algorithms:
            keep = [s for s in range(cfg.seeds)
                    if per_seed[(alg, s)][2] and per_seed[('smdp', s)][2]]
            samples = [max(per_seed[(alg, s)][0], 1) / max(per_seed[('smdp', s)][0], 1)
                       for s in keep]
            costs = [max(per_seed[(alg, s)][1], 1.0) / max(per_seed[('smdp', s)][1], 1.0)
                     for s in keep]
            report.summary_rows.append([alg, size, _geomean(samples), _geomean(costs)])


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    """Run every seed and algorithm of ``cfg`` and aggregate the metrics."""
    report = MetricsReport(cfg.experiment)
    if cfg.experiment in BO_EXPERIMENTS:
        _run_bo(cfg, report)
    else:
        _run_path(cfg, report)
    report.timing = {alg: {'mean_step_seconds': float(np.mean(t)) if t else 0.0,
                           'steps': len(t)}
                     for alg, t in report.timing.items()}
    return report


def write_rows(path, columns, rows):
    with open(path, 'w', newline='') as f:
        w = csv.writer(f, lineterminator='\n')
        w.writerow(columns)
        w.writerows(rows)


def emit_csv(report: MetricsReport, out_dir) -> list[Path]:
    """Write steps, runs and summary CSVs plus ``timing.json`` to ``out_dir``.

    Wall times live only in ``timing.json`` so that the CSVs are reproducible
    byte for byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kind = 'bo' if report.experiment in BO_EXPERIMENTS else 'path'
    stem = report.experiment.replace('-', '_')
    paths = [out / f"{stem}_steps.csv", out / f"{stem}_runs.csv",
             out / f"{stem}_summary.csv"]
    write_rows(paths[0], STEP_COLUMNS[kind], report.step_rows)
    write_rows(paths[1], RUN_COLUMNS[kind], report.run_rows)
    write_rows(paths[2], SUMMARY_COLUMNS[kind], report.summary_rows)
    (out / 'timing.json').write_text(json.dumps(report.timing, indent=2, sort_keys=True))
    return paths
