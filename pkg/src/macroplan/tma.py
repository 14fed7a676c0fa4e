"""Task macro-actions (TMAs) built as graphs of belief-space funnels.

A TMA samples milestone beliefs over a task's workspace, connects nearest
neighbors with funnel controllers, estimates every edge's landing
distribution, reward and duration by offline simulation, and solves an
undiscounted dynamic program over the graph with absorbing goal and failure
nodes.  Success probabilities and expected completion times then come from
the absorbing-chain linear systems, so the planner can query them for any
initial belief.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import chains
from .beliefs import (BeliefNorm, GainSpec, GaussianBelief, LinearGaussianModel,
                      Lma, LmaParams, SimState, TerminationRecord, design_lma,
                      run_lma, stationary_covariance, stationary_kalman_gain)
from .errors import ConfigError, GoalUnreachable, NonConvergent, NoOutgoingEdge

FAILURE_ID = 0

TMA_FORMAT = "macroplan-tma-v1"


@dataclass(frozen=True)
class Milestone:
    """An epsilon-ball around an attractor belief; id 0 is the failure node."""

    id: int
    center: Optional[GaussianBelief]
    epsilon: float

    def __post_init__(self):
        if self.id != FAILURE_ID and self.center is None:
            raise ValueError("non-failure milestones need a center")
        if self.id != FAILURE_ID and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class GraphEdge:
    """A funnel edge with its estimated landing statistics."""

    from_id: int
    to_id: int
    lma: Lma
    landing_probs: Dict[int, float]
    reward: float
    time: float
    sample_count: int

    def __post_init__(self):
        total = sum(self.landing_probs.values())
        if self.sample_count > 0 and abs(total - 1.0) > 1e-9:
            raise ValueError(f"landing_probs sum to {total}, expected 1")


@dataclass
class TmaGraph:
    milestones: Dict[int, Milestone]
    edges: Dict[int, List[GraphEdge]]   # from_id -> outgoing edges
    goal_id: int
    failure_value: float

    def __post_init__(self):
        if self.goal_id not in self.milestones:
            raise ValueError("goal milestone missing")
        if self.failure_value > 0:
            raise ValueError("failure_value must be non-positive")

    def transient_ids(self) -> List[int]:
        return sorted(i for i in self.milestones
                      if i not in (FAILURE_ID, self.goal_id))

    def outgoing(self, node_id: int) -> List[GraphEdge]:
        return self.edges.get(node_id, [])


@dataclass
class Tma:
    """A solved TMA: graph, greedy policy, and its closed-form analytics."""

    graph: TmaGraph
    policy: Dict[int, GraphEdge]
    values: Dict[int, float]
    success: Dict[int, float]
    time_to_goal: Dict[int, float]
    availability: frozenset = frozenset()
    norm: BeliefNorm = field(default_factory=BeliefNorm)
    start_id: Optional[int] = None
    model: Optional[LinearGaussianModel] = None

    def __post_init__(self):
        self._refresh_cache()

    def _refresh_cache(self):
        ids = sorted(i for i in self.graph.milestones if i != FAILURE_ID)
        self._ids = np.array(ids, dtype=int)
        self._means = np.stack([self.graph.milestones[i].center.mean for i in ids])
        self._covs = np.stack([self.graph.milestones[i].center.cov for i in ids])
        self._eps = np.array([self.graph.milestones[i].epsilon for i in ids])

    def distances(self, b: GaussianBelief) -> np.ndarray:
        dm = np.linalg.norm(self._means - b.mean[None, :], axis=1)
        dc = np.linalg.norm((self._covs - b.cov[None, :, :]).reshape(len(self._ids), -1), axis=1)
        return self.norm.w_mean * dm + self.norm.w_cov * dc

    def nearest_milestone_id(self, b: GaussianBelief) -> int:
        d = self.distances(b)
        inside = np.flatnonzero(d <= self._eps)
        if inside.size:
            return int(self._ids[inside[0]])   # ids sorted, so lowest id wins
        # nearest overall; ties break to the lower id via argmin order
        return int(self._ids[int(np.argmin(d))])

    def query_from_belief(self, b: GaussianBelief) -> Tuple[float, float, float]:
        nid = self.nearest_milestone_id(b)
        return self.values[nid], self.success[nid], self.time_to_goal[nid]


def query_from_belief(tma: Tma, b: GaussianBelief) -> Tuple[float, float, float]:
    """Value, success probability and expected completion time for ``b``."""
    return tma.query_from_belief(b)


@dataclass(frozen=True)
class TmaConfig:
    """Sampling and estimation configuration for TMA construction."""

    n_nodes: int = 8                 # sampled milestones including the goal
    k_neighbors: int = 4
    m_sims: int = 50
    epsilon: float = 0.1
    start_epsilon: float = 1e-9
    max_steps: int = 10_000
    failure_value: float = -100.0
    gain_spec: GainSpec = field(default_factory=GainSpec)
    bounds_lo: Optional[np.ndarray] = None
    bounds_hi: Optional[np.ndarray] = None
    norm: BeliefNorm = field(default_factory=BeliefNorm)
    dp_tol: float = 1e-9
    threads: int = 1


def estimate_edge(start_milestone: Milestone, lma: Lma, to_id: int,
                  all_milestones: Dict[int, Milestone],
                  model: LinearGaussianModel, m: int, max_steps: int,
                  rng: np.random.Generator,
                  norm: BeliefNorm = BeliefNorm()) -> GraphEdge:
    """Monte Carlo estimate of one edge's landing distribution, reward and
    duration.  Starts are the milestone center plus Gaussian mean jitter
    (sigma = epsilon/3); timeouts fold into the failure node's mass."""
    if m < 1:
        raise ValueError("m must be >= 1")
    center = start_milestone.center
    sigma = start_milestone.epsilon / 3.0
    stops = [ms for i, ms in sorted(all_milestones.items())
             if i not in (FAILURE_ID, start_milestone.id)]
    cov_sqrt = _sqrt_psd(center.cov)
    counts: Dict[int, int] = {i: 0 for i in all_milestones}
    total_reward = 0.0
    total_time = 0.0
    for _ in range(m):
        mean = center.mean + sigma * rng.standard_normal(center.mean.shape)
        truth = mean + cov_sqrt @ rng.standard_normal(center.mean.shape)
        sim = SimState(truth=truth, belief=GaussianBelief(mean=mean, cov=center.cov))
        rec = run_lma(lma, sim, stops, model, max_steps, rng, norm)
        if rec.outcome == TerminationRecord.LANDED:
            counts[rec.region_id] += 1
        else:
            counts[FAILURE_ID] += 1
        total_reward += rec.accrued_reward
        total_time += rec.elapsed_steps
    probs = {i: c / m for i, c in counts.items()}
    mean_time = max(total_time / m, 1e-9)  # edge times must stay positive
    return GraphEdge(from_id=start_milestone.id, to_id=to_id, lma=lma,
                     landing_probs=probs, reward=total_reward / m,
                     time=mean_time, sample_count=m)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ v.T


def solve_graph_dp(graph: TmaGraph, tol: float = 1e-9,
                   max_sweeps: int = 100_000
                   ) -> Tuple[Dict[int, float], Dict[int, GraphEdge]]:
    """Value iteration over the LMA graph with absorbing boundaries.

    V(goal) = 0 and V(failure) = failure_value are held fixed; ties in the
    greedy argmax break toward the lowest edge target id.
    """
    values: Dict[int, float] = {graph.goal_id: 0.0, FAILURE_ID: graph.failure_value}
    transient = graph.transient_ids()
    for i in transient:
        if not graph.outgoing(i):
            raise NoOutgoingEdge(f"node {i} has no outgoing edges")
        values[i] = 0.0

    for _ in range(max_sweeps):
        delta = 0.0
        for i in transient:
            best = -np.inf
            for edge in sorted(graph.outgoing(i), key=lambda e: e.to_id):
                rhs = edge.reward + sum(p * values[j]
                                        for j, p in edge.landing_probs.items() if p)
                if rhs > best:
                    best = rhs
            delta = max(delta, abs(best - values[i]))
            values[i] = best
        if delta <= tol:
            break
    else:
        raise NonConvergent("graph DP did not converge; improper policy cycle?")

    policy: Dict[int, GraphEdge] = {}
    for i in transient:
        best_edge, best = None, -np.inf
        for edge in sorted(graph.outgoing(i), key=lambda e: e.to_id):
            rhs = edge.reward + sum(p * values[j]
                                    for j, p in edge.landing_probs.items() if p)
            if rhs > best:
                best, best_edge = rhs, edge
        policy[i] = best_edge
    return values, policy


def _policy_transition_blocks(graph: TmaGraph, policy: Dict[int, GraphEdge]):
    transient = graph.transient_ids()
    idx = {i: k for k, i in enumerate(transient)}
    n = len(transient)
    Q = np.zeros((n, n))
    to_goal = np.zeros(n)
    times = np.zeros(n)
    for i in transient:
        edge = policy[i]
        times[idx[i]] = edge.time
        for j, p in edge.landing_probs.items():
            if p == 0.0:
                continue
            if j == graph.goal_id:
                to_goal[idx[i]] += p
            elif j != FAILURE_ID:
                Q[idx[i], idx[j]] += p
    return transient, Q, to_goal, times


def success_probabilities(graph: TmaGraph,
                          policy: Dict[int, GraphEdge]) -> Dict[int, float]:
    """Goal-absorption probability for every node under the fixed policy."""
    transient, Q, to_goal, _ = _policy_transition_blocks(graph, policy)
    h = chains.absorption_probabilities(Q, to_goal)
    out = {graph.goal_id: 1.0, FAILURE_ID: 0.0}
    for i, v in zip(transient, h):
        out[i] = float(min(max(v, 0.0), 1.0))
    return out


def expected_times(graph: TmaGraph,
                   policy: Dict[int, GraphEdge]) -> Dict[int, float]:
    """Expected steps to absorption for every node under the fixed policy."""
    transient, Q, _, times = _policy_transition_blocks(graph, policy)
    t = chains.expected_absorption_times(Q, times)
    out = {graph.goal_id: 0.0, FAILURE_ID: 0.0}
    for i, v in zip(transient, t):
        out[i] = float(v)
    return out


def construct_tma(start: GaussianBelief, goal_mean: np.ndarray,
                  task_model: LinearGaussianModel, cfg: TmaConfig,
                  rng: np.random.Generator) -> Tma:
    """Build and solve a TMA graph (offline phase).

    Milestone ids: 0 failure, 1 goal, 2..n-1 sampled, n the singleton start.
    """
    if cfg.n_nodes < 2:
        raise ConfigError("n_nodes must be >= 2")
    if cfg.k_neighbors < 1 or cfg.m_sims < 1:
        raise ConfigError("k_neighbors and m_sims must be >= 1")
    goal_mean = np.asarray(goal_mean, dtype=float).ravel()

    # one gain/filter design serves every edge (stationary model)
    base_lma = design_lma(task_model, goal_mean, cfg.gain_spec)
    p_stat = base_lma.attractor.cov
    kgain = base_lma.kalman_gain
    gain = base_lma.params.gain

    milestones: Dict[int, Milestone] = {
        FAILURE_ID: Milestone(id=FAILURE_ID, center=None, epsilon=1.0),
        1: Milestone(id=1, center=GaussianBelief(mean=goal_mean, cov=p_stat),
                     epsilon=cfg.epsilon),
    }
    lo = cfg.bounds_lo if cfg.bounds_lo is not None else np.zeros(task_model.state_dim)
    hi = cfg.bounds_hi if cfg.bounds_hi is not None else np.ones(task_model.state_dim)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n_sampled = cfg.n_nodes - 1  # goal is one of the n_nodes sampled milestones
    min_sep = 2.0 * cfg.epsilon  # overlapping balls would create free cycles
    tries = 0
    next_id = 2
    while next_id < n_sampled + 1:
        mean = lo + (hi - lo) * rng.random(task_model.state_dim)
        tries += 1
        if tries > 1000 * max(n_sampled, 1):
            raise ConfigError("could not sample constraint-free milestones")
        if task_model.constraint_set(mean):
            continue
        if any(np.linalg.norm(mean - ms.center.mean) < min_sep
               for i, ms in milestones.items() if i != FAILURE_ID):
            continue
        milestones[next_id] = Milestone(
            id=next_id, center=GaussianBelief(mean=mean, cov=p_stat),
            epsilon=cfg.epsilon)
        next_id += 1
    start_id = n_sampled + 1
    milestones[start_id] = Milestone(id=start_id, center=start,
                                     epsilon=cfg.start_epsilon)

    # k-nearest-neighbor connectivity by Euclidean distance between means;
    # the singleton start node is never a connection target
    target_ids = [i for i in milestones if i not in (FAILURE_ID, start_id)]
    target_means = np.stack([milestones[i].center.mean for i in target_ids])
    jobs = []
    for i in sorted(milestones):
        if i in (FAILURE_ID, 1):
            continue  # goal and failure are absorbing
        src = milestones[i]
        d = np.linalg.norm(target_means - src.center.mean[None, :], axis=1)
        order = [target_ids[k] for k in np.argsort(d, kind="stable")
                 if target_ids[k] != i]
        for j in order[:cfg.k_neighbors]:
            lma = Lma(params=LmaParams(gain=gain, target=milestones[j].center.mean),
                      kalman_gain=kgain,
                      attractor=GaussianBelief(mean=milestones[j].center.mean,
                                               cov=p_stat))
            jobs.append((i, j, lma))

    edge_rngs = rng.spawn(len(jobs))

    def run_job(args):
        (i, j, lma), sub = args
        return estimate_edge(milestones[i], lma, j, milestones, task_model,
                             cfg.m_sims, cfg.max_steps, sub, cfg.norm)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(run_job, zip(jobs, edge_rngs)))
    else:
        results = [run_job(a) for a in zip(jobs, edge_rngs)]

    edges: Dict[int, List[GraphEdge]] = {}
    for e in results:
        edges.setdefault(e.from_id, []).append(e)

    graph = TmaGraph(milestones=milestones, edges=edges, goal_id=1,
                     failure_value=cfg.failure_value)
    values, policy = solve_graph_dp(graph, tol=cfg.dp_tol)
    success = success_probabilities(graph, policy)
    times = expected_times(graph, policy)
    if success[start_id] == 0.0:
        raise GoalUnreachable("zero success probability from the start node")
    return Tma(graph=graph, policy=policy, values=values, success=success,
               time_to_goal=times, norm=cfg.norm, start_id=start_id,
               model=task_model)


# ---------------------------------------------------------------------------
# serialization

def _belief_to_dict(b: GaussianBelief) -> dict:
    return {"mean": b.mean.tolist(), "cov": b.cov.tolist()}


def _belief_from_dict(d: dict) -> GaussianBelief:
    return GaussianBelief(mean=np.array(d["mean"]), cov=np.array(d["cov"]))


def tma_to_dict(tma: Tma) -> dict:
    g = tma.graph
    return {
        "format": TMA_FORMAT,
        "goal_id": g.goal_id,
        "start_id": tma.start_id,
        "failure_value": g.failure_value,
        "norm": tma.norm.to_dict(),
        "availability": sorted(tma.availability),
        "model": tma.model.to_dict() if tma.model is not None else None,
        "milestones": [
            {"id": ms.id, "epsilon": ms.epsilon,
             "center": None if ms.center is None else _belief_to_dict(ms.center)}
            for _, ms in sorted(g.milestones.items())],
        "edges": [
            {"from": e.from_id, "to": e.to_id,
             "gain": e.lma.params.gain.tolist(),
             "target": e.lma.params.target.tolist(),
             "kalman_gain": e.lma.kalman_gain.tolist(),
             "attractor": _belief_to_dict(e.lma.attractor),
             "landing_probs": {str(k): v for k, v in sorted(e.landing_probs.items())},
             "reward": e.reward, "time": e.time, "sample_count": e.sample_count}
            for i in sorted(g.edges) for e in g.edges[i]],
        "policy": {str(i): e.to_id for i, e in sorted(tma.policy.items())},
        "values": {str(i): v for i, v in sorted(tma.values.items())},
        "success": {str(i): v for i, v in sorted(tma.success.items())},
        "time_to_goal": {str(i): v for i, v in sorted(tma.time_to_goal.items())},
    }


def tma_from_dict(d: dict) -> Tma:
    if d.get("format") != TMA_FORMAT:
        raise ConfigError(f"unsupported TMA format {d.get('format')!r}")
    milestones = {}
    for m in d["milestones"]:
        milestones[m["id"]] = Milestone(
            id=m["id"], epsilon=m["epsilon"],
            center=None if m["center"] is None else _belief_from_dict(m["center"]))
    edges: Dict[int, List[GraphEdge]] = {}
    edge_index: Dict[Tuple[int, int], GraphEdge] = {}
    for e in d["edges"]:
        lma = Lma(params=LmaParams(gain=np.array(e["gain"]),
                                   target=np.array(e["target"])),
                  kalman_gain=np.array(e["kalman_gain"]),
                  attractor=_belief_from_dict(e["attractor"]))
        edge = GraphEdge(from_id=e["from"], to_id=e["to"], lma=lma,
                         landing_probs={int(k): v for k, v in e["landing_probs"].items()},
                         reward=e["reward"], time=e["time"],
                         sample_count=e["sample_count"])
        edges.setdefault(edge.from_id, []).append(edge)
        edge_index[(edge.from_id, edge.to_id)] = edge
    graph = TmaGraph(milestones=milestones, edges=edges,
                     goal_id=d["goal_id"], failure_value=d["failure_value"])
    policy = {int(i): edge_index[(int(i), to)] for i, to in d["policy"].items()}
    model = (LinearGaussianModel.from_dict(d["model"])
             if d.get("model") is not None else None)
    return Tma(graph=graph, policy=policy,
               values={int(k): v for k, v in d["values"].items()},
               success={int(k): v for k, v in d["success"].items()},
               time_to_goal={int(k): v for k, v in d["time_to_goal"].items()},
               availability=frozenset(d.get("availability", [])),
               norm=BeliefNorm.from_dict(d["norm"]),
               start_id=d.get("start_id"), model=model)


def save_tma(tma: Tma, path: str) -> None:
    with open(path, "w") as f:
        json.dump(tma_to_dict(tma), f, indent=1, sort_keys=True)


def load_tma(path: str) -> Tma:
    with open(path) as f:
        return tma_from_dict(json.load(f))
