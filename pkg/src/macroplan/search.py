"""Finite-state-controller policy search over macro-actions.

Policies are node-labeled controllers: each node carries a macro-action, and
edges are keyed by the observation class seen when that macro-action
terminates.  Search samples controllers uniformly at random; the masked
variant repeatedly freezes high-consensus (macro-action, observation) ->
successor decisions found among the elite policies, concentrating subsequent
sampling on the remaining free choices.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from .decposmdp import Domain, evaluate_joint_policy
from .errors import NoValidSuccessor


@dataclass
class PolicyController:
    """One agent's controller: node labels plus (node, obs) -> node edges."""

    nodes: List[Hashable]
    edges: Dict[Tuple[int, Hashable], int]
    initial_node: int = 0

    def edge(self, node: int, obs_label: Hashable) -> int:
        return self.edges.get((node, obs_label), node)

    def to_dict(self) -> dict:
        return {"nodes": list(self.nodes),
                "edges": sorted([[n, str(o), t] for (n, o), t
                                 in self.edges.items()]),
                "initial_node": self.initial_node}


@dataclass
class JointPolicy:
    controllers: List[PolicyController]

    def to_dict(self) -> dict:
        return {"format": "macroplan-policy-v1",
                "controllers": [c.to_dict() for c in self.controllers]}


def save_policy(policy: JointPolicy, path: str) -> None:
    with open(path, "w") as f:
        json.dump(policy.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_policy(path: str, obs_labels: Optional[Dict[str, Hashable]] = None
                ) -> JointPolicy:
    """Read a policy written by save_policy.  Observation labels were
    stringified on save; ``obs_labels`` maps them back (identity default)."""
    with open(path) as f:
        d = json.load(f)
    if d.get("format") != "macroplan-policy-v1":
        raise ValueError(f"unrecognized policy format {d.get('format')!r}")
    controllers = []
    for c in d["controllers"]:
        edges = {}
        for n, o, t in c["edges"]:
            key = obs_labels[o] if obs_labels else o
            edges[(int(n), key)] = int(t)
        controllers.append(PolicyController(nodes=c["nodes"], edges=edges,
                                            initial_node=c["initial_node"]))
    return JointPolicy(controllers=controllers)


# per-agent mask: (macro-action label, observation class) -> successor label
Mask = Dict[Tuple[Hashable, Hashable], Hashable]


@dataclass
class SearchConfig:
    n_nodes: int = 13
    budget: int = 200                # total policy evaluations
    iter_max_mc: int = 50            # evaluations per outer iteration
    k_d: int = 5                     # elite set size
    mask_threshold: float = 0.6      # consensus frequency to freeze a pair
    explore_rate: float = 0.35       # chance to resample an unmasked decision
    n_rollouts: int = 3
    horizon_macro_steps: int = 14

    def __post_init__(self):
        if not (0.0 < self.mask_threshold <= 1.0):
            raise ValueError("mask_threshold must lie in (0, 1]")
        if self.budget < 1 or self.iter_max_mc < 1 or self.k_d < 1:
            raise ValueError("budget, iter_max_mc and k_d must be positive")
        if not (0.0 < self.explore_rate <= 1.0):
            raise ValueError("explore_rate must lie in (0, 1]")


def _valid_targets(domain: Domain, agent: int, labels: Sequence[Hashable],
                   label: Hashable, obs: Hashable) -> List[int]:
    succ = set(domain.valid_successors(agent, label, obs))
    return [i for i, lb in enumerate(labels) if lb in succ]


def sample_valid_controller(domain: Domain, agent: int, n_nodes: int,
                            rng: np.random.Generator,
                            mask: Optional[Mask] = None,
                            base: Optional[PolicyController] = None,
                            explore_rate: float = 0.35,
                            max_attempts: int = 1000) -> PolicyController:
    """Sample a controller uniformly among valid ones.

    Without a mask, node labels and edges are drawn fresh.  With a mask,
    the sample is a perturbation of ``base`` honoring the mask: nodes whose
    label participates in a masked pair (as source or forced successor) keep
    their labels, masked (label, obs) edges point at the lowest node carrying
    the forced successor, and every other label/edge decision is resampled
    with probability ``explore_rate`` (otherwise copied from ``base`` when
    still valid).
    """
    roster = sorted(domain.roster(agent), key=str)
    alphabet = domain.obs_alphabet()
    if mask:
        pinned = {lb for lb, _ in mask} | set(mask.values())
    for _ in range(max_attempts):
        if mask and base is not None:
            labels = [lb if (lb in pinned
                             or rng.random() >= explore_rate)
                      else roster[int(rng.integers(len(roster)))]
                      for lb in base.nodes]
        else:
            labels = [roster[k] for k in rng.integers(len(roster),
                                                      size=n_nodes)]
        carrier: Dict[Hashable, int] = {}
        for i, lb in enumerate(labels):
            carrier.setdefault(lb, i)
        ok = True
        edges: Dict[Tuple[int, Hashable], int] = {}
        for i, lb in enumerate(labels):
            for obs in alphabet:
                if mask and (lb, obs) in mask and mask[(lb, obs)] in carrier:
                    edges[(i, obs)] = carrier[mask[(lb, obs)]]
                    continue
                targets = _valid_targets(domain, agent, labels, lb, obs)
                if not targets:
                    ok = False
                    break
                if (mask and base is not None
                        and rng.random() >= explore_rate
                        and base.edges.get((i, obs)) in targets):
                    edges[(i, obs)] = base.edges[(i, obs)]
                else:
                    edges[(i, obs)] = int(targets[rng.integers(len(targets))])
            if not ok:
                break
        if ok:
            return PolicyController(nodes=labels, edges=edges)
    raise NoValidSuccessor(
        f"no valid controller found for agent {agent} in {max_attempts} attempts")


def sample_joint_policy(domain: Domain, n_nodes: int, rng: np.random.Generator,
                        masks: Optional[List[Mask]] = None,
                        base: Optional[JointPolicy] = None,
                        explore_rate: float = 0.35) -> JointPolicy:
    controllers = []
    for agent in range(domain.n_agents):
        m = masks[agent] if masks else None
        b = base.controllers[agent] if base is not None else None
        controllers.append(sample_valid_controller(
            domain, agent, n_nodes, rng, mask=m, base=b,
            explore_rate=explore_rate))
    return JointPolicy(controllers=controllers)


def create_mask(elites: Sequence[Tuple[float, JointPolicy]], domain: Domain,
                threshold: float, best: JointPolicy
                ) -> Tuple[List[Mask], JointPolicy]:
    """Freeze high-consensus successor decisions among elite policies.

    For each agent and each (macro-action label, observation) pair, count the
    successor labels chosen across all elite controller edges; if the modal
    successor's frequency reaches ``threshold`` the pair is masked.  The best
    policy's edges are rewritten so every masked pair points at a node
    carrying the modal label (the lowest such node); pairs with no carrier
    node in the best policy are dropped from the mask.
    """
    masks: List[Mask] = []
    rewritten = []
    for agent in range(domain.n_agents):
        counts: Dict[Tuple[Hashable, Hashable], Dict[Hashable, int]] = {}
        for _, pol in elites:
            c = pol.controllers[agent]
            for (node, obs), tgt in c.edges.items():
                key = (c.nodes[node], obs)
                bucket = counts.setdefault(key, {})
                succ = c.nodes[tgt]
                bucket[succ] = bucket.get(succ, 0) + 1
        mask: Mask = {}
        for key, bucket in counts.items():
            total = sum(bucket.values())
            modal, n_modal = max(bucket.items(), key=lambda kv: (kv[1], str(kv[0])))
            if n_modal / total >= threshold:
                mask[key] = modal
        base = best.controllers[agent]
        labels = list(base.nodes)
        carrier = {}
        for i, lb in enumerate(labels):
            carrier.setdefault(lb, i)
        edges = dict(base.edges)
        for (lb, obs), succ in list(mask.items()):
            if succ not in carrier:
                del mask[(lb, obs)]
                continue
            for i, node_lb in enumerate(labels):
                if node_lb == lb:
                    edges[(i, obs)] = carrier[succ]
        masks.append(mask)
        rewritten.append(PolicyController(nodes=labels, edges=edges,
                                          initial_node=base.initial_node))
    return masks, JointPolicy(controllers=rewritten)


@dataclass
class SearchResult:
    best_policy: JointPolicy
    best_value: float
    evaluations: int
    trace: List[Tuple[int, float]] = field(default_factory=list)
    samples: List[Tuple[int, float]] = field(default_factory=list)
    elites: List[Tuple[float, JointPolicy]] = field(default_factory=list)


def _push_elite(elites: List[Tuple[float, JointPolicy]], value: float,
                policy: JointPolicy, k_d: int) -> None:
    elites.append((value, policy))
    elites.sort(key=lambda vp: -vp[0])
    del elites[k_d:]


def mmcs(domain: Domain, cfg: SearchConfig, rng: np.random.Generator,
         use_mask: bool = True) -> SearchResult:
    """Masked Monte Carlo search over finite-state controllers.

    Inner iterations sample and evaluate policies subject to the current
    mask; the elite set persists across outer iterations and the mask is
    rebuilt from it after every outer iteration (masks are not permanent).
    With ``use_mask=False`` this is the plain Monte Carlo baseline.
    """
    elites: List[Tuple[float, JointPolicy]] = []
    masks: Optional[List[Mask]] = None
    base: Optional[JointPolicy] = None
    best_policy = None
    best_value = -math.inf
    trace: List[Tuple[int, float]] = []
    samples: List[Tuple[int, float]] = []
    evals = 0
    while evals < cfg.budget:
        inner = min(cfg.iter_max_mc, cfg.budget - evals)
        for _ in range(inner):
            pol = sample_joint_policy(domain, cfg.n_nodes, rng,
                                      masks=masks, base=base,
                                      explore_rate=cfg.explore_rate)
            pv = evaluate_joint_policy(pol, domain, cfg.n_rollouts,
                                       cfg.horizon_macro_steps, rng)
            evals += 1
            _push_elite(elites, pv.mean, pol, cfg.k_d)
            if pv.mean > best_value:
                best_value, best_policy = pv.mean, pol
            trace.append((evals, best_value))
            samples.append((evals, pv.mean))
        if use_mask:
            masks, base = create_mask(elites, domain, cfg.mask_threshold,
                                      best_policy)
            if not any(masks):
                masks, base = None, None
    return SearchResult(best_policy=best_policy, best_value=best_value,
                        evaluations=evals, trace=trace, samples=samples,
                        elites=elites)


def monte_carlo_search(domain: Domain, cfg: SearchConfig,
                       rng: np.random.Generator) -> SearchResult:
    """Unmasked baseline: every policy is drawn fresh from the full space."""
    return mmcs(domain, cfg, rng, use_mask=False)


def write_value_trace(trace: Sequence[Tuple[int, float]], path: str) -> None:
    """Write an (evaluation index, best value so far) trace as CSV; float
    repr keeps the file byte-identical across runs with the same seed."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["evaluation", "best_value"])
        for i, v in trace:
            w.writerow([i, repr(float(v))])


def controller_space_cardinality(domain: Domain, agent: int,
                                 n_nodes: int) -> int:
    """Exact number of valid controllers for one agent.

    Groups labelings by their label-count vector c: the number of labelings
    is the multinomial coefficient, and each node labeled pi contributes an
    independent edge choice of size sum(c[pi'] for valid successors pi')
    per observation class.  Count vectors with an empty choice set for an
    occupied label contribute nothing.
    """
    roster = sorted(domain.roster(agent), key=str)
    alphabet = domain.obs_alphabet()
    k = len(roster)
    succ_idx = {
        (pi, obs): [roster.index(s) for s in
                    domain.valid_successors(agent, pi, obs) if s in roster]
        for pi in roster for obs in alphabet}

    total = 0
    fact = [math.factorial(i) for i in range(n_nodes + 1)]

    def compositions(remaining: int, parts: int):
        if parts == 1:
            yield (remaining,)
            return
        for head in range(remaining + 1):
            for tail in compositions(remaining - head, parts - 1):
                yield (head,) + tail

    for c in compositions(n_nodes, k):
        coeff = fact[n_nodes]
        for ci in c:
            coeff //= fact[ci]
        term = coeff
        for pi_i, pi in enumerate(roster):
            if c[pi_i] == 0:
                continue
            w = 1
            for obs in alphabet:
                s = sum(c[j] for j in succ_idx[(pi, obs)])
                w *= s
            if w == 0:
                term = 0
                break
            term *= w ** c[pi_i]
        total += term
    return total
