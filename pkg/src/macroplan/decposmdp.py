"""Decentralized partially observable semi-Markov decision process machinery.

Agents run macro-actions asynchronously at the primitive level; a decision
segment ends the first time any agent's macro-action terminates.  The segment
reward is the per-step discounted joint reward accumulated up to that
termination, so the macro-level discounted sum telescopes exactly into the
primitive-level discounted sum.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Hashable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .beliefs import GaussianBelief, Lma, LmaParams, SimState, lma_step
from .errors import InitiationViolated
from .tma import FAILURE_ID, Tma


@dataclass(frozen=True)
class EState:
    """Element of the domain's finite environmental-state set."""

    value: Hashable


@dataclass(frozen=True)
class MacroObservation:
    """Observation emitted when a macro-action terminates."""

    terminal_milestone: int
    e_obs: Hashable


@dataclass
class MacroHistory:
    """Per-agent alternating (observation, macro-action id) record."""

    entries: List[Tuple[MacroObservation, Hashable]] = field(default_factory=list)

    def append(self, obs: MacroObservation, tma_id: Hashable) -> None:
        self.entries.append((obs, tma_id))


@dataclass
class RewardSpec:
    """Joint reward structure: per-agent terms, a team term, a multilinear
    combiner over them, and the discount factor."""

    per_agent: Optional[List[Callable]] = None
    team: Optional[Callable] = None
    combiner: Callable[[Sequence[float]], float] = sum
    discount: float = 0.99

    def __post_init__(self):
        if not (0.0 < self.discount <= 1.0):
            raise ValueError("discount must lie in (0, 1]")

    def combine(self, agent_rewards: Sequence[float], team_reward: float) -> float:
        return self.combiner(list(agent_rewards) + [team_reward])


def joint_reward(x_bar: Sequence, x_e, u_bar: Sequence,
                 rewards: RewardSpec) -> float:
    """Evaluate the joint reward g(R1..Rn, RE) at a primitive configuration."""
    if rewards.per_agent is None or rewards.team is None:
        raise ValueError("RewardSpec needs per_agent and team functions")
    parts = [r(x, x_e, u) for r, x, u in zip(rewards.per_agent, x_bar, u_bar)]
    parts.append(rewards.team(x_bar, x_e, u_bar))
    return rewards.combiner(parts)


def assert_multilinear(combiner: Callable[[Sequence[float]], float], n_args: int,
                       rng: np.random.Generator, probes: int = 100,
                       tol: float = 1e-9) -> None:
    """Check linearity of the combiner in each slot at random probe points."""
    for _ in range(probes):
        base = list(rng.standard_normal(n_args))
        slot = int(rng.integers(n_args))
        a, b = rng.standard_normal(2)
        lam = rng.random()
        xa, xb, xc = base[:], base[:], base[:]
        xa[slot], xb[slot] = a, b
        xc[slot] = lam * a + (1 - lam) * b
        lhs = combiner(xc)
        rhs = lam * combiner(xa) + (1 - lam) * combiner(xb)
        if abs(lhs - rhs) > tol:
            raise AssertionError(
                f"combiner not linear in slot {slot}: {lhs} vs {rhs}")


@dataclass
class TmaSpec:
    """A macro-action available to an agent: either a solved graph TMA
    (movement) or a fixed-duration task with a world effect."""

    id: Hashable
    name: str
    tma: Optional[Tma] = None
    duration: Optional[int] = None
    agents_required: int = 1
    availability: frozenset = frozenset()
    effect: Optional[Hashable] = None     # event tag applied at termination
    step_reward: float = 0.0              # per primitive step, timed tasks

    def __post_init__(self):
        if (self.tma is None) == (self.duration is None):
            raise ValueError("exactly one of tma/duration must be set")


@dataclass
class AgentStatus:
    tma_id: Optional[Hashable] = None
    milestone_id: Optional[int] = None
    busy: bool = False
    dead: bool = False


@dataclass
class JointConfig:
    """The Dec-POSMDP state: per-agent simulations plus the e-state."""

    sims: List[SimState]
    statuses: List[AgentStatus]
    e_state: Hashable
    world: Any = None
    clock: int = 0
    executions: Dict[int, "Execution"] = field(default_factory=dict)

    @property
    def agent_beliefs(self) -> List[GaussianBelief]:
        return [s.belief for s in self.sims]

    def alive(self) -> List[int]:
        return [i for i, st in enumerate(self.statuses) if not st.dead]

    def clone(self) -> "JointConfig":
        if self.executions:
            raise ValueError("cannot clone mid-segment (executions pending)")
        return copy.deepcopy(self)


class Execution:
    """One running macro-action instance covering one or more agents."""

    agents: Tuple[int, ...]
    spec: TmaSpec

    def step(self, config: JointConfig, rng: np.random.Generator
             ) -> "StepOutcome":  # pragma: no cover - interface
        raise NotImplementedError


@dataclass
class StepOutcome:
    rewards: Dict[int, float]
    done: bool = False
    dead: Set[int] = field(default_factory=set)
    events: List[Hashable] = field(default_factory=list)
    terminal_milestones: Dict[int, int] = field(default_factory=dict)


class TimedExecution(Execution):
    """Fixed-duration task; its effect event fires at the terminal step."""

    def __init__(self, spec: TmaSpec, agents: Sequence[int],
                 terminal_milestones: Optional[Dict[int, int]] = None):
        self.spec = spec
        self.agents = tuple(agents)
        self.remaining = int(spec.duration)
        self.terminal_milestones = terminal_milestones or {a: -1 for a in self.agents}

    def step(self, config: JointConfig, rng: np.random.Generator) -> StepOutcome:
        self.remaining -= 1
        for a in self.agents:
            config.sims[a].elapsed += 1
        out = StepOutcome(rewards={a: self.spec.step_reward for a in self.agents})
        if self.remaining <= 0:
            out.done = True
            out.terminal_milestones = dict(self.terminal_milestones)
            if self.spec.effect is not None:
                out.events = [(self.spec.effect, self.agents)]
        return out


class GraphTmaExecution(Execution):
    """Primitive-level walk of a solved TMA graph: at each milestone the
    policy's funnel runs until the belief lands in the next ball."""

    def __init__(self, spec: TmaSpec, agent: int, config: JointConfig,
                 max_edge_steps: int = 1000):
        assert spec.tma is not None
        self.spec = spec
        self.agents = (agent,)
        self.tma = spec.tma
        self.model = spec.tma.model
        self.max_edge_steps = max_edge_steps
        belief = config.sims[agent].belief
        d = self.tma.distances(belief)
        goal = self.tma.graph.goal_id
        goal_idx = int(np.flatnonzero(self.tma._ids == goal)[0])
        # assigned while already inside the goal ball: hold one step, done
        self.hold_done = bool(d[goal_idx] <= self.tma._eps[goal_idx])
        if self.hold_done:
            self.node = goal
        else:
            # enter the graph at the nearest milestone that has a policy edge
            candidates = [(d[k], int(i)) for k, i in enumerate(self.tma._ids)
                          if int(i) in self.tma.policy]
            self.node = min(candidates)[1]
        self.steps_on_edge = 0

    def _hold_lma(self):
        return self.tma.policy[next(iter(self.tma.policy))].lma

    def step(self, config: JointConfig, rng: np.random.Generator) -> StepOutcome:
        agent = self.agents[0]
        sim = config.sims[agent]
        if self.hold_done:
            # station-keep on the goal for a single step
            goal = self.tma.graph.milestones[self.tma.graph.goal_id]
            lma = _station_keeping_lma(self.tma, goal)
            before = sim.accrued_reward
            lma_step(lma, sim, self.model, rng)
            r = sim.accrued_reward - before
            return StepOutcome(rewards={agent: r}, done=True,
                               terminal_milestones={agent: self.tma.graph.goal_id})
        edge = self.tma.policy[self.node]
        before = sim.accrued_reward
        lma_step(edge.lma, sim, self.model, rng)
        r = sim.accrued_reward - before
        out = StepOutcome(rewards={agent: r})
        if self.model.constraint_set(sim.truth):
            out.dead = {agent}
            return out
        self.steps_on_edge += 1
        d = self.tma.distances(sim.belief)
        inside = [int(self.tma._ids[k]) for k in np.flatnonzero(d <= self.tma._eps)]
        inside = [i for i in inside
                  if i == self.tma.graph.goal_id or i in self.tma.policy]
        if inside:
            nid = inside[0]
            if nid != self.node:
                self.node = nid
                self.steps_on_edge = 0
                config.statuses[agent].milestone_id = nid
            if nid == self.tma.graph.goal_id:
                out.done = True
                out.terminal_milestones = {agent: nid}
                return out
        if self.steps_on_edge >= self.max_edge_steps:
            out.dead = {agent}  # never-terminating funnel folds into failure
        return out


def _station_keeping_lma(tma: Tma, goal_milestone):
    edge = next(iter(tma.policy.values()))
    return Lma(params=LmaParams(gain=edge.lma.params.gain,
                                target=goal_milestone.center.mean),
               kalman_gain=edge.lma.kalman_gain,
               attractor=goal_milestone.center)


class JointGraphExecution(Execution):
    """Two linked graph walks; terminates when both reach their goals.
    An agent that arrives first station-keeps until its partner lands."""

    def __init__(self, spec: TmaSpec, agents: Sequence[int], config: JointConfig,
                 max_edge_steps: int = 1000):
        self.spec = spec
        self.agents = tuple(agents)
        self.subs = {a: GraphTmaExecution(spec, a, config, max_edge_steps)
                     for a in self.agents}
        self.finished: Set[int] = set()

    def step(self, config: JointConfig, rng: np.random.Generator) -> StepOutcome:
        out = StepOutcome(rewards={})
        terminal = {}
        for a in sorted(self.agents):
            sub = self.subs[a]
            if a in self.finished:
                sim = config.sims[a]
                goal = sub.tma.graph.milestones[sub.tma.graph.goal_id]
                lma = _station_keeping_lma(sub.tma, goal)
                before = sim.accrued_reward
                lma_step(lma, sim, sub.model, rng)
                out.rewards[a] = sim.accrued_reward - before
                continue
            sub_out = sub.step(config, rng)
            out.rewards[a] = sub_out.rewards[a]
            out.dead |= sub_out.dead
            if sub_out.done:
                self.finished.add(a)
                terminal[a] = sub_out.terminal_milestones[a]
        if out.dead:
            return out
        if self.finished == set(self.agents):
            out.done = True
            out.terminal_milestones = {
                a: self.subs[a].tma.graph.goal_id for a in self.agents}
            if self.spec.effect is not None:
                out.events = [(self.spec.effect, self.agents)]
        return out


class Domain:
    """Base class for Dec-POSMDP domains.

    Subclasses own the world model: rosters, initiation predicates,
    environmental dynamics, observations, and team rewards.
    """

    n_agents: int
    rewards: RewardSpec

    def roster(self, agent: int) -> Dict[Hashable, TmaSpec]:
        raise NotImplementedError

    def initial(self, rng: np.random.Generator) -> JointConfig:
        raise NotImplementedError

    def initiation_ok(self, agent: int, tma_id: Hashable,
                      config: JointConfig) -> bool:
        raise NotImplementedError

    def begin_executions(self, assigned: Dict[int, Hashable],
                         config: JointConfig,
                         rng: np.random.Generator) -> List[Execution]:
        """Create executions for newly assigned agents; joint macro-actions
        must arrive in consistently assigned groups."""
        raise NotImplementedError

    def observe(self, agent: int, config: JointConfig) -> Hashable:
        raise NotImplementedError

    def obs_class(self, obs: MacroObservation) -> Hashable:
        """Controller edge label for an observation; defaults to e_obs."""
        return obs.e_obs

    def obs_alphabet(self) -> List[Hashable]:
        raise NotImplementedError

    def team_reward(self, events: List, config: JointConfig) -> float:
        return 0.0

    def e_dynamics(self, events: List, config: JointConfig,
                   rng: np.random.Generator) -> None:
        pass

    def estate(self, config: JointConfig) -> Hashable:
        return config.e_state

    def fallback_tma(self, agent: int) -> Optional[Hashable]:
        """Macro-action substituted when an assignment cannot initiate."""
        return None

    def valid_successors(self, agent: int, tma_id: Hashable,
                         obs_label: Hashable) -> List[Hashable]:
        """Successor macro-actions whose initiation set intersects the
        termination set of ``tma_id`` under observation ``obs_label``.
        Defaults to the whole roster (unrestricted chaining)."""
        return sorted(self.roster(agent), key=str)

    def belief_signature(self, agent: int, config: JointConfig) -> Hashable:
        st = config.statuses[agent]
        if st.dead:
            return "dead"
        spec = self.roster(agent).get(st.tma_id) if st.tma_id is not None else None
        if spec is not None and spec.tma is not None:
            return spec.tma.nearest_milestone_id(config.sims[agent].belief)
        return st.milestone_id


@dataclass
class SegmentResult:
    """Outcome of one decision segment (up to the first termination)."""

    reward_Rtau: float
    tau_min: int
    terminated_agents: Set[int]
    observations: Dict[int, MacroObservation]
    next: JointConfig
    dead_agents: Set[int] = field(default_factory=set)
    primitive_rewards: List[float] = field(default_factory=list)


def step_joint(config: JointConfig, assigned: Dict[int, Hashable],
               domain: Domain, rng: np.random.Generator) -> SegmentResult:
    """Advance all agents in lockstep until the first macro-action terminates.

    ``assigned`` maps idle agents to their next macro-action; initiation
    violations raise.  Rewards are discounted from the segment start.
    """
    for agent, tma_id in assigned.items():
        st = config.statuses[agent]
        if st.dead or st.busy:
            raise InitiationViolated(f"agent {agent} cannot accept a macro-action")
        if not domain.initiation_ok(agent, tma_id, config):
            raise InitiationViolated(
                f"macro-action {tma_id!r} cannot initiate for agent {agent}")
    new_execs = domain.begin_executions(assigned, config, rng)
    for exe in new_execs:
        for a in exe.agents:
            config.executions[a] = exe
            config.statuses[a].busy = True
            config.statuses[a].tma_id = exe.spec.id

    gamma = domain.rewards.discount
    reward_rtau = 0.0
    prim = []
    terminated: Set[int] = set()
    observations: Dict[int, MacroObservation] = {}
    dead: Set[int] = set()
    t = 0
    disc = 1.0
    while True:
        execs = []
        seen = set()
        for a in sorted(config.executions):
            exe = config.executions[a]
            if id(exe) not in seen:
                seen.add(id(exe))
                execs.append(exe)
        if not execs:
            break  # nothing can advance (all agents dead or idle)

        agent_rewards = {i: 0.0 for i in range(len(config.sims))}
        events: List = []
        done_execs = []
        for exe in execs:
            out = exe.step(config, rng)
            for a, r in out.rewards.items():
                agent_rewards[a] += r
            events.extend(out.events)
            for a in out.dead:
                config.statuses[a].dead = True
                config.statuses[a].busy = False
                dead.add(a)
                config.executions.pop(a, None)
            if out.done and not out.dead:
                done_execs.append((exe, out))
        team = domain.team_reward(events, config)
        rbar = domain.rewards.combine(
            [agent_rewards[i] for i in range(len(config.sims))], team)
        reward_rtau += disc * rbar
        prim.append(rbar)
        t += 1
        disc *= gamma

        if done_execs:
            domain.e_dynamics(events, config, rng)
            for exe, out in done_execs:
                for a in exe.agents:
                    config.statuses[a].busy = False
                    config.executions.pop(a, None)
                    terminated.add(a)
                    tm = out.terminal_milestones.get(a, -1)
                    config.statuses[a].milestone_id = tm
                    observations[a] = MacroObservation(
                        terminal_milestone=tm,
                        e_obs=domain.observe(a, config))
            break
        if not any(not st.dead and st.busy for st in config.statuses):
            break  # everyone died mid-segment

    config.clock += t
    return SegmentResult(reward_Rtau=reward_rtau, tau_min=t,
                         terminated_agents=terminated,
                         observations=observations, next=config,
                         dead_agents=dead, primitive_rewards=prim)


@dataclass
class RolloutTrace:
    value: float
    primitive_value: float
    macro_steps: int
    final: Optional[JointConfig] = None


@dataclass
class PolicyValue:
    mean: float
    stderr: float
    rollouts: List[RolloutTrace] = field(default_factory=list)


def _resolve_assignments(policy, domain: Domain, config: JointConfig,
                         nodes: List[int]) -> Dict[int, Hashable]:
    assigned = {}
    for i in config.alive():
        if config.statuses[i].busy:
            continue
        tma_id = policy.controllers[i].nodes[nodes[i]]
        if not domain.initiation_ok(i, tma_id, config):
            tma_id = domain.fallback_tma(i)
            if tma_id is None:
                continue
        assigned[i] = tma_id
    # joint macro-actions need a consistent partner group this segment;
    # unpaired agents fall back
    counts: Dict[Hashable, List[int]] = {}
    for i, tid in assigned.items():
        counts.setdefault(tid, []).append(i)
    for tid, members in counts.items():
        spec = domain.roster(members[0])[tid]
        if spec.agents_required > len(members):
            fb = None
            for i in members:
                fb = domain.fallback_tma(i)
                if fb is not None:
                    assigned[i] = fb
                else:
                    del assigned[i]
        elif spec.agents_required > 1 and len(members) > spec.agents_required:
            for i in members[spec.agents_required:]:
                fb = domain.fallback_tma(i)
                if fb is not None:
                    assigned[i] = fb
                else:
                    del assigned[i]
    return assigned


def run_rollout(policy, domain: Domain, horizon_macro_steps: int,
                rng: np.random.Generator,
                identity_tol: float = 1e-9) -> RolloutTrace:
    """One seeded rollout of a joint policy.  Asserts the semi-Markov
    bookkeeping identity: the macro-level discounted sum equals the
    primitive-level one."""
    gamma = domain.rewards.discount
    config = domain.initial(rng)
    nodes = [policy.controllers[i].initial_node
             for i in range(domain.n_agents)]
    macro_value = 0.0
    prim_ledger: List[float] = []
    t_start = 0
    for _ in range(horizon_macro_steps):
        if not config.alive():
            break
        assigned = _resolve_assignments(policy, domain, config, nodes)
        if not assigned and not any(st.busy for st in config.statuses):
            break
        seg = step_joint(config, assigned, domain, rng)
        if seg.tau_min == 0:
            break
        macro_value += gamma ** t_start * seg.reward_Rtau
        prim_ledger.extend(seg.primitive_rewards)
        t_start += seg.tau_min
        for a in seg.terminated_agents:
            label = domain.obs_class(seg.observations[a])
            nodes[a] = policy.controllers[a].edge(nodes[a], label)
    primitive_value = float(sum(r * gamma ** t
                                for t, r in enumerate(prim_ledger)))
    if abs(primitive_value - macro_value) > identity_tol * max(
            1.0, abs(primitive_value)):
        raise AssertionError(
            f"semi-Markov identity violated: {macro_value} vs {primitive_value}")
    return RolloutTrace(value=macro_value, primitive_value=primitive_value,
                        macro_steps=t_start, final=config)


def evaluate_joint_policy(policy, domain: Domain, n_rollouts: int,
                          horizon_macro_steps: int,
                          rng: np.random.Generator,
                          identity_tol: float = 1e-9) -> PolicyValue:
    """Monte Carlo estimate of the joint value of a finite-state-controller
    policy over independent seeded rollouts."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    traces = [run_rollout(policy, domain, horizon_macro_steps, sub,
                          identity_tol) for sub in rng.spawn(n_rollouts)]
    arr = np.asarray([t.value for t in traces])
    stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    for t in traces:
        t.final = None  # rollout configs are internal to the estimate
    return PolicyValue(mean=float(arr.mean()), stderr=stderr, rollouts=traces)


def estimate_transition_kernel(config: JointConfig,
                               assigned: Dict[int, Hashable], domain: Domain,
                               k_steps: int, n_sims: int,
                               rng: np.random.Generator) -> Dict[Hashable, float]:
    """Empirical one-segment transition kernel from a configuration under a
    joint macro-action assignment.  Outcomes are keyed by (per-agent belief
    signatures, e-state, capped segment length)."""
    if n_sims < 1:
        raise ValueError("n_sims must be >= 1")
    counts: Dict[Hashable, int] = {}
    for sub in rng.spawn(n_sims):
        c = config.clone()
        seg = step_joint(c, dict(assigned), domain, sub)
        sig = tuple(domain.belief_signature(i, c) for i in range(domain.n_agents))
        key = (sig, domain.estate(c), min(seg.tau_min, k_steps))
        counts[key] = counts.get(key, 0) + 1
    return {k: v / n_sims for k, v in sorted(counts.items(), key=str)}
