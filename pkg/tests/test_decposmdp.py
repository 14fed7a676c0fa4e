"""Tests for the Dec-POSMDP layer: asynchronous segments, the semi-Markov
reward identity, joint executions, and the empirical transition kernel."""

import numpy as np
import pytest

from macroplan.beliefs import (GainSpec, GaussianBelief, LinearGaussianModel,
                               NoConstraints, PredicateConstraints, SimState,
                               StepCost)
from macroplan.decposmdp import (Domain, GraphTmaExecution, JointConfig,
                                 JointGraphExecution, MacroObservation,
                                 AgentStatus, RewardSpec, TimedExecution,
                                 TmaSpec, assert_multilinear,
                                 estimate_transition_kernel,
                                 evaluate_joint_policy, joint_reward,
                                 step_joint)
from macroplan.errors import InitiationViolated
from macroplan.tma import TmaConfig, construct_tma


# ---------------------------------------------------------------------------
# toy timed-task domain: deterministic durations, no continuous dynamics
# ---------------------------------------------------------------------------

def _dummy_sim():
    b = GaussianBelief(mean=np.zeros(1), cov=np.eye(1))
    return SimState(truth=np.zeros(1), belief=b)


class TimedToyDomain(Domain):
    """Two agents, fixed-duration tasks; step reward -1 per busy agent."""

    def __init__(self, gamma=1.0):
        self.n_agents = 2
        self.rewards = RewardSpec(discount=gamma)
        self._roster = {
            "t3": TmaSpec(id="t3", name="t3", duration=3, step_reward=-1.0),
            "t9": TmaSpec(id="t9", name="t9", duration=9, step_reward=-1.0),
            "ding": TmaSpec(id="ding", name="ding", duration=2,
                            step_reward=0.0, effect="ding"),
            "wait": TmaSpec(id="wait", name="wait", duration=1,
                            step_reward=0.0),
            "never": TmaSpec(id="never", name="never", duration=1),
        }

    def roster(self, agent):
        return self._roster

    def initial(self, rng):
        return JointConfig(sims=[_dummy_sim() for _ in range(self.n_agents)],
                           statuses=[AgentStatus() for _ in range(self.n_agents)],
                           e_state="idle")

    def initiation_ok(self, agent, tma_id, config):
        return tma_id != "never"

    def begin_executions(self, assigned, config, rng):
        return [TimedExecution(self._roster[tid], [a])
                for a, tid in sorted(assigned.items())]

    def observe(self, agent, config):
        return config.e_state

    def obs_alphabet(self):
        return ["idle", "dinged"]

    def team_reward(self, events, config):
        return 10.0 * sum(1 for e in events if e[0] == "ding")

    def e_dynamics(self, events, config, rng):
        if any(e[0] == "ding" for e in events):
            config.e_state = "dinged"

    def fallback_tma(self, agent):
        return "wait"


def test_asynchronous_termination_segments():
    """3-step and 9-step tasks started together: segments of 3, then 6."""
    dom = TimedToyDomain()
    rng = np.random.default_rng(0)
    cfg = dom.initial(rng)
    seg = step_joint(cfg, {0: "t3", 1: "t9"}, dom, rng)
    assert seg.tau_min == 3
    assert seg.terminated_agents == {0}
    assert cfg.statuses[0].busy is False
    assert cfg.statuses[1].busy is True
    # agent 1 keeps running; agent 0 starts a fresh 3-step task
    seg2 = step_joint(cfg, {0: "t3"}, dom, rng)
    assert seg2.tau_min == 3
    assert seg2.terminated_agents == {0}
    seg3 = step_joint(cfg, {0: "t3"}, dom, rng)
    assert seg3.tau_min == 3
    assert seg3.terminated_agents == {0, 1}
    assert cfg.clock == 9


def test_segment_reward_discounted_by_hand():
    """Both agents busy for 3 steps at -1 each, gamma=0.9:
    R_tau = -2 (1 + 0.9 + 0.81)."""
    dom = TimedToyDomain(gamma=0.9)
    rng = np.random.default_rng(0)
    cfg = dom.initial(rng)
    seg = step_joint(cfg, {0: "t3", 1: "t3"}, dom, rng)
    assert seg.reward_Rtau == pytest.approx(-2 * (1 + 0.9 + 0.81), abs=1e-12)
    assert seg.primitive_rewards == [-2.0, -2.0, -2.0]


def test_effect_event_pays_team_reward_and_moves_estate():
    dom = TimedToyDomain()
    rng = np.random.default_rng(0)
    cfg = dom.initial(rng)
    seg = step_joint(cfg, {0: "ding"}, dom, rng)
    assert seg.tau_min == 2
    assert seg.reward_Rtau == pytest.approx(10.0)
    assert cfg.e_state == "dinged"
    assert seg.observations[0] == MacroObservation(terminal_milestone=-1,
                                                   e_obs="dinged")


def test_initiation_violation_raises():
    dom = TimedToyDomain()
    rng = np.random.default_rng(0)
    cfg = dom.initial(rng)
    with pytest.raises(InitiationViolated):
        step_joint(cfg, {0: "never"}, dom, rng)


def test_busy_agent_cannot_be_reassigned():
    dom = TimedToyDomain()
    rng = np.random.default_rng(0)
    cfg = dom.initial(rng)
    step_joint(cfg, {0: "t3", 1: "t9"}, dom, rng)  # agent 1 still busy
    with pytest.raises(InitiationViolated):
        step_joint(cfg, {1: "t3"}, dom, rng)


# ---------------------------------------------------------------------------
# joint reward structure
# ---------------------------------------------------------------------------

def test_joint_reward_evaluates_combiner():
    spec = RewardSpec(
        per_agent=[lambda x, e, u: float(x), lambda x, e, u: 2.0 * float(x)],
        team=lambda xs, e, us: 5.0,
        combiner=sum)
    val = joint_reward([1.0, 3.0], None, [0.0, 0.0], spec)
    assert val == pytest.approx(1.0 + 6.0 + 5.0)


def test_multilinear_check_accepts_sum_and_product():
    rng = np.random.default_rng(1)
    assert_multilinear(sum, 3, rng)
    assert_multilinear(lambda xs: xs[0] * xs[1] * xs[2], 3,
                       np.random.default_rng(2))


def test_multilinear_check_rejects_square():
    with pytest.raises(AssertionError):
        assert_multilinear(lambda xs: xs[0] ** 2 + xs[1], 2,
                           np.random.default_rng(3))


def test_invalid_discount_rejected():
    with pytest.raises(ValueError):
        RewardSpec(discount=0.0)
    with pytest.raises(ValueError):
        RewardSpec(discount=1.5)


# ---------------------------------------------------------------------------
# policy evaluation on the toy domain
# ---------------------------------------------------------------------------

class _Controller:
    def __init__(self, labels, edges, initial_node=0):
        self.nodes = labels
        self._edges = edges
        self.initial_node = initial_node

    def edge(self, node, label):
        return self._edges.get((node, label), node)


class _Policy:
    def __init__(self, controllers):
        self.controllers = controllers


def test_evaluate_policy_hand_value():
    """Agent 0 dings twice then waits; agent 1 always waits.  Undiscounted,
    two dings pay exactly 20."""
    dom = TimedToyDomain()
    c0 = _Controller(labels=["ding", "ding", "wait"],
                     edges={(0, "idle"): 1, (0, "dinged"): 1,
                            (1, "idle"): 2, (1, "dinged"): 2})
    c1 = _Controller(labels=["wait"], edges={})
    pv = evaluate_joint_policy(_Policy([c0, c1]), dom, n_rollouts=4,
                               horizon_macro_steps=6,
                               rng=np.random.default_rng(0))
    assert pv.mean == pytest.approx(20.0)
    assert pv.stderr == pytest.approx(0.0)


def test_evaluate_policy_substitutes_fallback_on_bad_initiation():
    dom = TimedToyDomain()
    c0 = _Controller(labels=["never"], edges={})
    c1 = _Controller(labels=["ding"], edges={})
    pv = evaluate_joint_policy(_Policy([c0, c1]), dom, n_rollouts=1,
                               horizon_macro_steps=4,
                               rng=np.random.default_rng(0))
    # agent 0 silently waits (1-step segments); agent 1 completes two dings
    assert pv.mean == pytest.approx(20.0)


def test_evaluate_policy_deterministic_per_seed():
    dom = TimedToyDomain(gamma=0.95)
    c = _Controller(labels=["ding", "t3"], edges={(0, "dinged"): 1,
                                                  (1, "idle"): 0,
                                                  (1, "dinged"): 0})
    pol = _Policy([c, _Controller(labels=["wait"], edges={})])
    a = evaluate_joint_policy(pol, dom, 8, 10, np.random.default_rng(42))
    b = evaluate_joint_policy(pol, dom, 8, 10, np.random.default_rng(42))
    assert a.mean == b.mean and a.stderr == b.stderr


def test_transition_kernel_point_mass_on_deterministic_domain():
    dom = TimedToyDomain()
    cfg = dom.initial(np.random.default_rng(0))
    kern = estimate_transition_kernel(cfg, {0: "t3", 1: "t9"}, dom,
                                      k_steps=20, n_sims=32,
                                      rng=np.random.default_rng(0))
    assert len(kern) == 1
    ((sig, estate, k), p), = kern.items()
    assert p == pytest.approx(1.0)
    assert k == 3 and estate == "idle"


def test_transition_kernel_caps_segment_length():
    dom = TimedToyDomain()
    cfg = dom.initial(np.random.default_rng(0))
    kern = estimate_transition_kernel(cfg, {0: "t9"}, dom, k_steps=4,
                                      n_sims=8, rng=np.random.default_rng(0))
    (_, _, k), = kern.keys()
    assert k == 4


def test_clone_refuses_mid_segment():
    dom = TimedToyDomain()
    rng = np.random.default_rng(0)
    cfg = dom.initial(rng)
    step_joint(cfg, {0: "t3", 1: "t9"}, dom, rng)  # agent 1 mid-execution
    with pytest.raises(ValueError):
        cfg.clone()


# ---------------------------------------------------------------------------
# graph-TMA executions on continuous dynamics
# ---------------------------------------------------------------------------

def _integrator_model(noise=1e-4, constraints=None):
    n = 2
    return LinearGaussianModel(
        A=np.eye(n), G=np.eye(n), C=np.eye(n),
        Q=noise * np.eye(n), R_obs=noise * np.eye(n),
        step_cost=StepCost(base=0.01, u_weight=0.0),
        constraints=constraints or NoConstraints())


@pytest.fixture(scope="module")
def small_tma():
    model = _integrator_model()
    cfg = TmaConfig(n_nodes=2, k_neighbors=1, m_sims=20, epsilon=0.05,
                    max_steps=400, bounds_lo=np.zeros(2), bounds_hi=np.ones(2),
                    gain_spec=GainSpec(kind="lqr", control_weight=0.1))
    start = GaussianBelief(mean=np.array([0.1, 0.1]),
                           cov=1e-4 * np.eye(2))
    return construct_tma(start, np.array([0.8, 0.8]), model, cfg,
                         np.random.default_rng(7)), model


class GraphToyDomain(Domain):
    """One or two agents sharing a movement TMA roster."""

    def __init__(self, tma, model, n_agents=1, joint=False):
        self.n_agents = n_agents
        self.rewards = RewardSpec(discount=1.0)
        spec_kw = dict(tma=tma, agents_required=2 if joint else 1,
                       effect="arrived" if joint else None)
        self._roster = {"go": TmaSpec(id="go", name="go", **spec_kw),
                        "wait": TmaSpec(id="wait", name="wait", duration=1)}
        self._model = model
        self._joint = joint

    def roster(self, agent):
        return self._roster

    def initial(self, rng):
        sims = []
        for _ in range(self.n_agents):
            mean = np.array([0.1, 0.1])
            sims.append(SimState(truth=mean.copy(),
                                 belief=GaussianBelief(mean=mean,
                                                       cov=1e-4 * np.eye(2))))
        return JointConfig(sims=sims,
                           statuses=[AgentStatus() for _ in range(self.n_agents)],
                           e_state=0)

    def initiation_ok(self, agent, tma_id, config):
        return True

    def begin_executions(self, assigned, config, rng):
        if self._joint and set(assigned.values()) == {"go"}:
            return [JointGraphExecution(self._roster["go"],
                                        sorted(assigned), config)]
        out = []
        for a, tid in sorted(assigned.items()):
            spec = self._roster[tid]
            if spec.duration is not None:
                out.append(TimedExecution(spec, [a]))
            else:
                out.append(GraphTmaExecution(spec, a, config))
        return out

    def observe(self, agent, config):
        return config.e_state


def test_graph_execution_reaches_goal(small_tma):
    tma, model = small_tma
    dom = GraphToyDomain(tma, model)
    rng = np.random.default_rng(3)
    cfg = dom.initial(rng)
    seg = step_joint(cfg, {0: "go"}, dom, rng)
    assert seg.terminated_agents == {0}
    assert seg.observations[0].terminal_milestone == tma.graph.goal_id
    goal = tma.graph.milestones[tma.graph.goal_id].center.mean
    assert np.linalg.norm(cfg.sims[0].belief.mean - goal) < 0.1
    # step cost 0.01/step, undiscounted
    assert seg.reward_Rtau == pytest.approx(-0.01 * seg.tau_min, abs=1e-9)


def test_graph_execution_at_goal_holds_one_step(small_tma):
    tma, model = small_tma
    dom = GraphToyDomain(tma, model)
    rng = np.random.default_rng(4)
    cfg = dom.initial(rng)
    step_joint(cfg, {0: "go"}, dom, rng)
    seg = step_joint(cfg, {0: "go"}, dom, rng)  # already at the goal
    assert seg.tau_min == 1
    assert seg.terminated_agents == {0}


def test_joint_graph_execution_terminates_together(small_tma):
    tma, model = small_tma
    dom = GraphToyDomain(tma, model, n_agents=2, joint=True)
    rng = np.random.default_rng(5)
    cfg = dom.initial(rng)
    seg = step_joint(cfg, {0: "go", 1: "go"}, dom, rng)
    assert seg.terminated_agents == {0, 1}
    for a in (0, 1):
        assert seg.observations[a].terminal_milestone == tma.graph.goal_id


def test_constraint_violation_kills_agent_not_mission(small_tma):
    tma, _ = small_tma
    # same dynamics, but the whole workspace is forbidden: first step dies
    lethal = _integrator_model(
        constraints=PredicateConstraints(lambda x: True))
    spec = TmaSpec(id="go", name="go", tma=tma)

    class LethalDomain(GraphToyDomain):
        def begin_executions(self, assigned, config, rng):
            out = []
            for a, tid in sorted(assigned.items()):
                if tid == "go" and a == 0:
                    exe = GraphTmaExecution(spec, a, config)
                    exe.model = lethal
                    out.append(exe)
                else:
                    out.append(TimedExecution(self._roster["wait"], [a]))
            return out

    dom = LethalDomain(tma, lethal, n_agents=2)
    rng = np.random.default_rng(6)
    cfg = dom.initial(rng)
    seg = step_joint(cfg, {0: "go", 1: "wait"}, dom, rng)
    assert 0 in seg.dead_agents
    assert cfg.statuses[0].dead
    # agent 1's one-step wait still terminates the segment normally
    assert seg.terminated_agents == {1}
    assert cfg.alive() == [1]


def test_semi_markov_identity_on_graph_domain(small_tma):
    """Macro discounted sum equals the primitive discounted sum to 1e-9
    (asserted inside evaluate_joint_policy on every rollout)."""
    tma, model = small_tma
    dom = GraphToyDomain(tma, model)
    dom.rewards = RewardSpec(discount=0.97)
    c = _Controller(labels=["go", "wait"], edges={(0, 0): 1, (1, 0): 0})
    pv = evaluate_joint_policy(_Policy([c]), dom, n_rollouts=5,
                               horizon_macro_steps=6,
                               rng=np.random.default_rng(8))
    for tr in pv.rollouts:
        assert tr.value == pytest.approx(tr.primitive_value, abs=1e-9)
