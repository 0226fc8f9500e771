import itertools

import numpy as np
import pytest

from goose.engine import (GooseConfig, NoisyFunction, RunContext, SafeSetState,
                          constant_heuristic, run)
from goose.gp import BetaSchedule, ConfidenceState, KernelSpec, PosteriorModel, kernel_matrix
from goose.graph import SetCalculus, chain_graph
from goose.oracles import (Converged, ExplorationOracle, GoalOracle, OracleExhausted,
                           UcbOracle, boundary_sampling_reference, run_safeopt,
                           run_stageopt, safeopt_step, smdp_runner, stageopt_step,
                           ucb_suggest)
from goose.worlds import sample_gp_world, sample_grid_world


def dense_ucb(kernel, x_obs, y_obs, noise, grid, scale):
    k = kernel_matrix(kernel, x_obs, x_obs) + noise ** 2 * np.eye(len(x_obs))
    ks = kernel_matrix(kernel, x_obs, grid)
    mean = ks.T @ np.linalg.solve(k, y_obs)
    var = kernel.variance - np.einsum('ij,ij->j', ks, np.linalg.solve(k, ks))
    return mean + scale * np.sqrt(np.clip(var, 0, None))


def test_ucb_without_data_picks_lowest_index():
    grid = np.linspace(-1, 1, 50)
    oracle = UcbOracle(PosteriorModel(KernelSpec('rbf', 0.1, 1.0), 0.01, grid))
    domain = np.zeros(50, bool)
    domain[[7, 12, 30]] = True
    assert ucb_suggest(oracle, domain) == 7


def test_ucb_suggests_near_high_observation():
    grid = np.linspace(-1, 1, 201)
    kernel = KernelSpec('rbf', 0.01, 1.0)
    oracle = UcbOracle(PosteriorModel(kernel, 0.01, grid))
    oracle.notify(120, 5.0)
    got = ucb_suggest(oracle, np.ones(201, bool))
    ref = dense_ucb(kernel, grid[[120], None], np.array([5.0]), 0.01, grid[:, None], 3.0)
    assert got == int(np.argmax(ref))
    assert abs(grid[got] - grid[120]) <= 0.02


def test_ucb_singleton_and_empty_domain():
    oracle = UcbOracle(PosteriorModel(KernelSpec('rbf', 0.1, 1.0), 0.01, np.arange(5.0)))
    dom = np.zeros(5, bool)
    dom[3] = True
    assert ucb_suggest(oracle, dom) == 3
    with pytest.raises(ValueError):
        ucb_suggest(oracle, np.zeros(5, bool))


def test_ucb_deterministic_given_history():
    grid = np.linspace(0, 1, 30)
    picks = []
    for _ in range(2):
        oracle = UcbOracle(PosteriorModel(KernelSpec('rbf', 0.2, 1.0), 0.01, grid))
        for node, y in [(3, 0.2), (17, 1.1), (25, -0.4)]:
            oracle.notify(node, y)
        picks.append(ucb_suggest(oracle, np.ones(30, bool)))
    assert picks[0] == picks[1]


def test_shared_ucb_does_not_add_observation():
    model = PosteriorModel(KernelSpec('rbf', 0.1, 1.0), 0.01, np.arange(3.0))
    UcbOracle(model, shared=True).notify(1, 0.5)
    assert model.t == 0


def test_goal_oracle():
    oracle = GoalOracle(2)
    dom = np.ones(4, bool)
    assert oracle.suggest(dom) == 2
    dom[2] = False
    with pytest.raises(OracleExhausted):
        oracle.suggest(dom)


def test_exploration_oracle():
    g = chain_graph(np.arange(4.0))
    state = SafeSetState(g.mask([0, 1]), g.mask([0, 1, 2, 3]), g.mask([0]), g.empty())
    bounds = ConfidenceState.initial(4)
    ctx = RunContext(g, state, bounds, None, 0)
    assert ExplorationOracle().suggest(state.domain, ctx) == 2
    with pytest.raises(OracleExhausted):
        ExplorationOracle().suggest(g.mask([0, 1]), ctx)


# -- SafeOpt / StageOpt steps -------------------------------------------------

def naive_safeopt(graph, eps, pess, opt, lower, upper):
    n = graph.n
    width = [upper[i] - lower[i] for i in range(n)]
    best_l = max(lower[i] for i in range(n) if pess[i])
    cands = []
    for x in range(n):
        if not pess[x] or not width[x] > eps:
            continue
        maximizer = upper[x] >= best_l
        expander = any(opt[z] and not lower[z] >= 0 for z in graph.succ[x])
        if maximizer or expander:
            cands.append(x)
    if not cands:
        return None
    top = max(width[x] for x in cands)
    return min(x for x in cands if width[x] == top)


def test_safeopt_prefers_wider_expander():
    g = chain_graph(np.arange(3.0))
    calc = SetCalculus(g, 'direct', epsilon=0.05)
    # node 0 is the only maximizer, node 1 the only expander and wider
    bounds = ConfidenceState(np.array([0.8, 0.0, -1.0]), np.array([1.0, 0.6, 1.0]))
    pess, opt = g.mask([0, 1]), g.mask([0, 1, 2])
    assert safeopt_step(calc, pess, opt, bounds) == 1
    bounds.upper[0] = 1.5
    assert safeopt_step(calc, pess, opt, bounds) == 0


def test_safeopt_matches_naive_exhaustively():
    g = chain_graph(np.arange(3.0))
    calc = SetCalculus(g, 'direct', epsilon=0.1)
    levels = [(-1.0, 1.0), (0.0, 0.05), (0.2, 1.0), (0.0, 2.0), (0.5, 0.55)]
    checked = 0
    for pess in itertools.product([0, 1], repeat=3):
        if not any(pess):
            continue
        for extra in itertools.product([0, 1], repeat=3):
            opt = np.array([p or e for p, e in zip(pess, extra)], bool)
            for b in itertools.product(levels, repeat=3):
                lower = np.array([lo for lo, _ in b])
                upper = np.array([hi for _, hi in b])
                p = np.array(pess, bool)
                want = naive_safeopt(g, 0.1, p, opt, lower, upper)
                bounds = ConfidenceState(lower, upper)
                if want is None:
                    with pytest.raises(Converged):
                        safeopt_step(calc, p, opt, bounds)
                else:
                    assert safeopt_step(calc, p, opt, bounds) == want
                checked += 1
    assert checked > 1000


def test_safeopt_single_node():
    g = chain_graph(np.arange(1.0))
    calc = SetCalculus(g, 'direct', epsilon=0.1)
    pess = g.mask([0])
    assert safeopt_step(calc, pess, pess, ConfidenceState(np.array([0.0]), np.array([1.0]))) == 0
    with pytest.raises(Converged):
        safeopt_step(calc, pess, pess, ConfidenceState(np.array([0.0]), np.array([0.05])))
    with pytest.raises(ValueError):
        safeopt_step(calc, g.empty(), pess, ConfidenceState(np.array([0.0]), np.array([1.0])))


def stage_fixture():
    g = chain_graph(np.arange(4.0))
    calc = SetCalculus(g, 'direct', epsilon=0.1)
    model = PosteriorModel(KernelSpec('rbf', 0.5, 1.0), 0.01, g.points)
    model.add_observation(None, 2.0, index=0)
    model.add_observation(None, 0.1, index=2)
    oracle = UcbOracle(model, shared=True)
    # node 2 is the widest expander
    bounds = ConfidenceState(np.array([1.9, 0.0, 0.0, -1.0]), np.array([2.0, 0.5, 0.8, 1.0]))
    pess, opt = np.array([1, 1, 1, 0], bool), np.ones(4, bool)
    return calc, pess, opt, bounds, oracle


def fixture_ucb():
    kernel = KernelSpec('rbf', 0.5, 1.0)
    acq = dense_ucb(kernel, np.array([[0.0], [2.0]]), np.array([2.0, 0.1]), 0.01,
                    np.arange(4.0)[:, None], 3.0)
    return int(np.argmax(acq[:3]))


def test_stageopt_stage_boundary():
    calc, pess, opt, bounds, oracle = stage_fixture()
    ucb = fixture_ucb()
    assert ucb != 2
    assert stageopt_step(calc, pess, opt, bounds, oracle, 5, 5) == 2
    assert stageopt_step(calc, pess, opt, bounds, oracle, 6, 5) == ucb


def test_stageopt_t1_zero_is_safe_ucb():
    calc, pess, opt, bounds, oracle = stage_fixture()
    assert stageopt_step(calc, pess, opt, bounds, oracle, 1, 0) == fixture_ucb()


def test_stageopt_falls_back_to_ucb_without_expanders():
    calc, pess, opt, bounds, oracle = stage_fixture()
    opt = pess.copy()
    assert stageopt_step(calc, pess, opt, bounds, oracle, 1, 10) == fixture_ucb()


def bo_case(seed):
    world = sample_gp_world(1, np.random.default_rng(seed))
    env = NoisyFunction(world.true_q, world.noise_std, np.random.default_rng(seed + 50))
    model = PosteriorModel(world.kernel, world.noise_std, world.graph.points)
    x0 = int(np.flatnonzero(world.seed)[0])
    model.add_observation(None, env(x0), index=x0)
    return world, env, model


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_baselines_stay_safe(seed):
    for runner in (run_safeopt, run_stageopt):
        world, env, model = bo_case(seed)
        trace = runner(world.graph, world.seed, env, model, GooseConfig(), 60)
        assert trace.safe
        assert len(trace.evaluations) == 60
        assert all(kind == 'objective' for kind, _, _ in trace.evaluations)


def test_stageopt_expands_then_exploits():
    world, env, model = bo_case(4)
    trace = run_stageopt(world.graph, world.seed, env, model, GooseConfig(), 80, t1=40)
    nodes = [n for _, n, _ in trace.evaluations]
    # exploitation concentrates on far fewer distinct nodes than expansion
    assert len(set(nodes[60:])) < len(set(nodes[:20]))


# -- SMDP ----------------------------------------------------------------------

def test_smdp_runner_is_goose_with_constant_heuristic():
    g = chain_graph(np.arange(30.0))
    q = 1.0 - 0.03 * np.arange(30.0)
    cfg = GooseConfig(mode='lipschitz', lipschitz=1.0)
    traces = []
    for use_runner in (True, False):
        model = PosteriorModel(KernelSpec('rbf', 2.0, 1.0), 0.01, g.points)
        env = NoisyFunction(q, 0.01, np.random.default_rng(3))
        if use_runner:
            traces.append(smdp_runner(g, g.mask([0]), env, model, cfg))
        else:
            traces.append(run(g, g.mask([0]), ExplorationOracle(), constant_heuristic,
                              env, model, cfg))
    assert traces[0].constraint_evals == traces[1].constraint_evals
    assert len(traces[0].constraint_evals) > 5


def test_smdp_explores_whole_safe_chain():
    g = chain_graph(np.arange(12.0))
    model = PosteriorModel(KernelSpec('rbf', 2.0, 1.0), 0.01, g.points)
    env = NoisyFunction(np.full(12, 0.8), 0.01, np.random.default_rng(0))
    trace = smdp_runner(g, g.mask([0]), env, model,
                        GooseConfig(mode='lipschitz', lipschitz=1.0, record_sets=True))
    assert trace.pess_history[-1].all()
    assert trace.objective_evals == []


@pytest.mark.parametrize('seed', [0, 1])
def test_smdp_matches_reference_on_grid(seed):
    world = sample_grid_world(8, 8, np.random.default_rng(seed))
    seqs = []
    for fn in ('engine', 'reference'):
        model = PosteriorModel(world.kernel, world.noise_std, world.graph.points,
                               prior_mean=world.prior_mean)
        env = NoisyFunction(world.true_q, world.noise_std, np.random.default_rng(9))
        cfg = GooseConfig(max_evals=400)
        if fn == 'engine':
            tr = smdp_runner(world.graph, world.seed, env, model, cfg, goal=world.goal)
            seqs.append(tr.constraint_nodes)
        else:
            seqs.append(boundary_sampling_reference(world.graph, world.seed, env, model,
                                                    cfg, world.goal))
    assert seqs[0] == seqs[1]
    assert len(seqs[0]) > 0
