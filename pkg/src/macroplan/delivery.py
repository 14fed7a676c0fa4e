"""Multi-robot package-delivery benchmark domain.

Two air robots and one ground robot deliver stochastically generated packages
from two bases to three destinations.  Small packages need one air robot;
large ones need a coordinated pair.  One destination sits inside regulated
airspace where air vehicles cannot fly, so those packages are handed to the
ground robot at a rendezvous point and trucked in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Tuple

import numpy as np

from .beliefs import (GainSpec, GaussianBelief, LinearGaussianModel,
                      RectConstraints, NoConstraints, SimState, StepCost)
from .decposmdp import (AgentStatus, Domain, Execution, GraphTmaExecution,
                        JointConfig, JointGraphExecution, RewardSpec,
                        TimedExecution, TmaSpec)
from .errors import ConfigError
from .tma import Tma, TmaConfig, construct_tma

AIR, GROUND = "air", "ground"
DESTS = ("d1", "d2", "dr")
NO_PACKAGE = "-"

# observation classes (controller edge alphabet)
OBS_ALPHABET = ["none", "empty", "s-d1", "s-d2", "s-dr",
                "L-a", "L-m", "rv-a", "rv-m"]


@dataclass(frozen=True)
class PackageDescriptor:
    """size 0 = no package, 1 = small (one air robot), 2 = large (pair)."""

    size: int
    destination: str

    def __post_init__(self):
        if self.size not in (0, 1, 2):
            raise ValueError("size must be 0, 1 or 2")
        if self.size == 0:
            object.__setattr__(self, "destination", NO_PACKAGE)
        elif self.destination not in DESTS:
            raise ValueError(f"unknown destination {self.destination!r}")

    @property
    def present(self) -> bool:
        return self.size > 0


EMPTY = PackageDescriptor(size=0, destination=NO_PACKAGE)


@dataclass(frozen=True)
class BaseEState:
    package: PackageDescriptor
    nearby: int  # 1 if another robot shares the base location

    def __post_init__(self):
        if self.nearby not in (0, 1):
            raise ValueError("nearby flag must be 0 or 1")


@dataclass(frozen=True)
class RobotKind:
    kind: str

    def __post_init__(self):
        if self.kind not in (AIR, GROUND):
            raise ValueError(f"unknown robot kind {self.kind!r}")


@dataclass
class WorldState:
    """Mutable per-rollout world: base inventories, carried packages,
    truck load, delivery tallies, and a package-conservation ledger."""

    base_packages: List[PackageDescriptor]
    positions: List[np.ndarray]
    carrying: List[Optional[PackageDescriptor]]
    joint_carry: Optional[PackageDescriptor] = None  # shared by both air robots
    delivered: Dict[str, int] = field(default_factory=lambda: {d: 0 for d in DESTS})
    pending_refill: List[int] = field(default_factory=list)
    created: int = 0
    dropped_ok: int = 0
    dropped_lost: int = 0

    def in_flight(self) -> int:
        n = sum(1 for p in self.base_packages if p.present)
        n += sum(1 for p in self.carrying if p is not None)
        n += 1 if self.joint_carry is not None else 0
        return n

    def audit_ok(self) -> bool:
        return self.created == self.dropped_ok + self.dropped_lost + self.in_flight()


@dataclass
class DeliveryConfig:
    """Geometry, stochastic package model, rewards and build knobs."""

    bases: Tuple[Tuple[float, float], ...] = ((0.15, 0.85), (0.85, 0.85))
    dests: Dict[str, Tuple[float, float]] = field(default_factory=lambda: {
        "d1": (0.15, 0.2), "d2": (0.85, 0.2), "dr": (0.5, 0.06)})
    rendezvous: Tuple[float, float] = (0.5, 0.45)
    regulated: Tuple[float, float, float, float] = (0.32, 0.0, 0.68, 0.18)
    colocate_radius: float = 0.05
    site_radius: float = 0.09

    # (size, destination) -> probability; must sum to 1
    package_probs: Dict[Tuple[int, str], float] = field(default_factory=lambda: {
        (1, "d1"): 0.35, (1, "d2"): 0.35, (1, "dr"): 0.10,
        (2, "d1"): 0.07, (2, "d2"): 0.07, (0, NO_PACKAGE): 0.06})

    delivery_bonus: float = 10.0
    step_cost: float = 0.01          # per primitive step per robot
    control_cost: float = 0.0
    failure_value: float = -100.0

    pickup_steps: int = 2
    putdown_steps: int = 2
    place_steps: int = 2
    wait_steps: int = 3

    air_dynamics: str = "double"     # "double" (default) or "single"
    process_noise: float = 2e-5
    obs_noise: float = 2e-5
    dt: float = 1.0

    tma_nodes: int = 6
    tma_neighbors: int = 3
    tma_sims: int = 10
    tma_epsilon: float = 0.06
    tma_max_steps: int = 400
    control_weight: float = 8.0

    discount: float = 0.9995
    horizon_macro_steps: int = 40
    n_rollouts: int = 2

    def __post_init__(self):
        total = sum(self.package_probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"package probabilities sum to {total}, not 1")
        if any(p < 0 for p in self.package_probs.values()):
            raise ConfigError("package probabilities must be non-negative")
        x0, y0, x1, y1 = self.regulated
        if not (x0 < x1 and y0 < y1):
            raise ConfigError("regulated airspace rectangle is degenerate")
        dx, dy = self.dests["dr"]
        if not (x0 <= dx <= x1 and y0 <= dy <= y1):
            raise ConfigError("destination dr must lie inside regulated airspace")
        for name, (px, py) in list(self.dests.items()):
            if name != "dr" and x0 <= px <= x1 and y0 <= py <= y1:
                raise ConfigError(f"destination {name} inside regulated airspace")
        rx, ry = self.rendezvous
        if x0 <= rx <= x1 and y0 <= ry <= y1:
            raise ConfigError("rendezvous point inside regulated airspace")


def desk_config() -> DeliveryConfig:
    """Small, fast configuration for search experiments on a laptop."""
    return DeliveryConfig(air_dynamics="single", tma_nodes=4, tma_neighbors=2,
                          tma_sims=6, tma_max_steps=250, control_weight=8.0)


def generate_packages(rng: np.random.Generator,
                      cfg: DeliveryConfig) -> PackageDescriptor:
    """One draw from the configured categorical (size, destination) model."""
    items = sorted(cfg.package_probs.items())
    probs = np.array([p for _, p in items])
    k = rng.choice(len(items), p=probs / probs.sum())
    size, dest = items[int(k)][0]
    return PackageDescriptor(size=size, destination=dest)


def _air_model(cfg: DeliveryConfig) -> LinearGaussianModel:
    cost = StepCost(base=cfg.step_cost, u_weight=cfg.control_cost)
    x0, y0, x1, y1 = cfg.regulated
    constraints = RectConstraints(rects=[((x0, y0), (x1, y1))])
    if cfg.air_dynamics == "single":
        n = 2
        return LinearGaussianModel(
            A=np.eye(n), G=cfg.dt * np.eye(n), C=np.eye(n),
            Q=cfg.process_noise * np.eye(n), R_obs=cfg.obs_noise * np.eye(n),
            step_cost=cost, constraints=constraints)
    if cfg.air_dynamics != "double":
        raise ConfigError(f"unknown air dynamics {cfg.air_dynamics!r}")
    dt = cfg.dt
    A = np.block([[np.eye(2), dt * np.eye(2)],
                  [np.zeros((2, 2)), np.eye(2)]])
    G = np.vstack([0.5 * dt ** 2 * np.eye(2), dt * np.eye(2)])
    C = np.hstack([np.eye(2), np.zeros((2, 2))])
    Q = np.diag([cfg.process_noise] * 2 + [cfg.process_noise] * 2)
    return LinearGaussianModel(A=A, G=G, C=C, Q=Q,
                               R_obs=cfg.obs_noise * np.eye(2),
                               step_cost=cost, constraints=constraints)


def _ground_model(cfg: DeliveryConfig) -> LinearGaussianModel:
    n = 2
    return LinearGaussianModel(
        A=np.eye(n), G=cfg.dt * np.eye(n), C=np.eye(n),
        Q=cfg.process_noise * np.eye(n), R_obs=cfg.obs_noise * np.eye(n),
        step_cost=StepCost(base=cfg.step_cost, u_weight=cfg.control_cost),
        constraints=NoConstraints())


def _goal_mean(model: LinearGaussianModel, xy) -> np.ndarray:
    g = np.zeros(model.state_dim)
    g[:2] = xy
    return g


def _build_movement_tma(model: LinearGaussianModel, xy, cfg: DeliveryConfig,
                        rng: np.random.Generator) -> Tma:
    n = model.state_dim
    lo = np.zeros(n)
    hi = np.ones(n)
    if n == 4:
        lo[2:], hi[2:] = -0.2, 0.2
    tma_cfg = TmaConfig(
        n_nodes=cfg.tma_nodes, k_neighbors=cfg.tma_neighbors,
        m_sims=cfg.tma_sims, epsilon=cfg.tma_epsilon,
        max_steps=cfg.tma_max_steps, failure_value=cfg.failure_value,
        gain_spec=GainSpec(kind="lqr", control_weight=cfg.control_weight),
        bounds_lo=lo, bounds_hi=hi)
    start = GaussianBelief(mean=_goal_mean(model, (0.5, 0.7)),
                           cov=1e-4 * np.eye(n))
    return construct_tma(start, _goal_mean(model, xy), model, tma_cfg, rng)


# air TMA ids
AIR_TMAS = ["goto-base-1", "goto-base-2", "goto-dest-1", "goto-dest-2",
            "joint-goto-dest-1", "joint-goto-dest-2", "goto-rv",
            "pickup", "joint-pickup", "putdown", "joint-putdown",
            "place-on-truck", "wait"]
GROUND_TMAS = ["goto-rv", "goto-dest-r", "putdown", "wait"]

_MOVE_AIR = ["goto-base-1", "goto-base-2", "wait"]


def _air_successors() -> Dict[Tuple[str, str], List[str]]:
    """Termination/initiation compatibility for air robots, keyed by
    (terminating macro-action, observation class)."""
    default = {
        "none": _MOVE_AIR,
        "empty": _MOVE_AIR,
        "s-d1": ["pickup", "goto-dest-1", "wait"],
        "s-d2": ["pickup", "goto-dest-2", "wait"],
        "s-dr": ["pickup", "goto-rv", "wait"],
        "L-a": ["joint-pickup", "wait"],
        "L-m": ["wait", "goto-base-1", "goto-base-2"],
        "rv-a": ["place-on-truck", "wait"],
        "rv-m": ["wait", "goto-base-1", "goto-base-2"],
    }
    table = {(pi, obs): list(succ) for pi in AIR_TMAS
             for obs, succ in default.items()}
    table.update({
        ("pickup", "s-d1"): ["goto-dest-1", "wait"],
        ("pickup", "s-d2"): ["goto-dest-2", "wait"],
        ("pickup", "s-dr"): ["goto-rv", "wait"],
        ("joint-pickup", "s-d1"): ["joint-goto-dest-1", "wait"],
        ("joint-pickup", "s-d2"): ["joint-goto-dest-2", "wait"],
        ("goto-dest-1", "s-d1"): ["putdown", "wait"],
        ("goto-dest-2", "s-d2"): ["putdown", "wait"],
        ("joint-goto-dest-1", "s-d1"): ["joint-putdown", "wait"],
        ("joint-goto-dest-2", "s-d2"): ["joint-putdown", "wait"],
        ("goto-rv", "s-dr"): ["place-on-truck", "wait"],
    })
    return table


def _ground_successors() -> Dict[Tuple[str, str], List[str]]:
    default = {
        "none": ["goto-rv", "wait"],
        "rv-a": ["wait", "goto-rv"],
        "rv-m": ["wait", "goto-rv"],
        "s-dr": ["goto-dest-r", "wait"],
    }
    # base-only observations never reach the ground robot; keep the sets
    # non-empty so controller sampling stays well-defined
    for obs in OBS_ALPHABET:
        default.setdefault(obs, ["wait"])
    table = {(pi, obs): list(succ) for pi in GROUND_TMAS
             for obs, succ in default.items()}
    table[("goto-dest-r", "s-dr")] = ["putdown", "wait"]
    table[("putdown", "none")] = ["goto-rv", "wait"]
    return table


class DeliveryDomain(Domain):
    """Dec-POSMDP wrapper over the delivery world."""

    def __init__(self, cfg: DeliveryConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.n_agents = 3
        self.kinds = [RobotKind(AIR), RobotKind(AIR), RobotKind(GROUND)]
        self.rewards = RewardSpec(discount=cfg.discount)
        self.air_model = _air_model(cfg)
        self.ground_model = _ground_model(cfg)

        sites_air = {"base-1": cfg.bases[0], "base-2": cfg.bases[1],
                     "dest-1": cfg.dests["d1"], "dest-2": cfg.dests["d2"],
                     "rv": cfg.rendezvous}
        self._air_tmas = {name: _build_movement_tma(self.air_model, xy, cfg, r)
                          for (name, xy), r in zip(sorted(sites_air.items()),
                                                   rng.spawn(len(sites_air)))}
        sites_ground = {"rv": cfg.rendezvous, "dest-r": cfg.dests["dr"]}
        self._ground_tmas = {
            name: _build_movement_tma(self.ground_model, xy, cfg, r)
            for (name, xy), r in zip(sorted(sites_ground.items()),
                                     rng.spawn(len(sites_ground)))}

        self._rosters = [self._air_roster(), self._air_roster(),
                         self._ground_roster()]
        self._succ = [_air_successors(), _air_successors(),
                      _ground_successors()]

    # ----- roster construction -------------------------------------------
    def _air_roster(self) -> Dict[str, TmaSpec]:
        cfg = self.cfg
        r = {}
        for j in (1, 2):
            r[f"goto-base-{j}"] = TmaSpec(id=f"goto-base-{j}",
                                          name=f"Go to Base {j}",
                                          tma=self._air_tmas[f"base-{j}"])
            r[f"goto-dest-{j}"] = TmaSpec(id=f"goto-dest-{j}",
                                          name=f"Go to Dest {j}",
                                          tma=self._air_tmas[f"dest-{j}"])
            r[f"joint-goto-dest-{j}"] = TmaSpec(
                id=f"joint-goto-dest-{j}", name=f"Joint go to Dest {j}",
                tma=self._air_tmas[f"dest-{j}"], agents_required=2)
        r["goto-rv"] = TmaSpec(id="goto-rv", name="Go to rendezvous",
                               tma=self._air_tmas["rv"])
        r["pickup"] = TmaSpec(id="pickup", name="Pick up package",
                              duration=cfg.pickup_steps, effect="pickup",
                              step_reward=-cfg.step_cost)
        r["joint-pickup"] = TmaSpec(id="joint-pickup",
                                    name="Joint pick up package",
                                    duration=cfg.pickup_steps,
                                    effect="joint-pickup", agents_required=2,
                                    step_reward=-cfg.step_cost)
        r["putdown"] = TmaSpec(id="putdown", name="Put down package",
                               duration=cfg.putdown_steps, effect="putdown",
                               step_reward=-cfg.step_cost)
        r["joint-putdown"] = TmaSpec(id="joint-putdown",
                                     name="Joint put down package",
                                     duration=cfg.putdown_steps,
                                     effect="joint-putdown", agents_required=2,
                                     step_reward=-cfg.step_cost)
        r["place-on-truck"] = TmaSpec(id="place-on-truck",
                                      name="Place package on truck",
                                      duration=cfg.place_steps,
                                      effect="place-on-truck",
                                      step_reward=-cfg.step_cost)
        r["wait"] = TmaSpec(id="wait", name="Wait at current location",
                            duration=cfg.wait_steps,
                            step_reward=-cfg.step_cost)
        return r

    def _ground_roster(self) -> Dict[str, TmaSpec]:
        cfg = self.cfg
        return {
            "goto-rv": TmaSpec(id="goto-rv", name="Go to rendezvous",
                               tma=self._ground_tmas["rv"]),
            "goto-dest-r": TmaSpec(id="goto-dest-r", name="Go to Dest r",
                                   tma=self._ground_tmas["dest-r"]),
            "putdown": TmaSpec(id="putdown", name="Put down package",
                               duration=cfg.putdown_steps, effect="putdown",
                               step_reward=-cfg.step_cost),
            "wait": TmaSpec(id="wait", name="Wait at current location",
                            duration=cfg.wait_steps,
                            step_reward=-cfg.step_cost),
        }

    # ----- Domain interface ----------------------------------------------
    def roster(self, agent: int) -> Dict[str, TmaSpec]:
        return self._rosters[agent]

    def fallback_tma(self, agent: int) -> str:
        return "wait"

    def obs_alphabet(self) -> List[str]:
        return list(OBS_ALPHABET)

    def valid_successors(self, agent, tma_id, obs_label):
        return list(self._succ[agent][(tma_id, obs_label)])

    def initial(self, rng: np.random.Generator) -> JointConfig:
        cfg = self.cfg
        starts = [cfg.bases[0], cfg.bases[1], cfg.rendezvous]
        models = [self.air_model, self.air_model, self.ground_model]
        sims = []
        for xy, model in zip(starts, models):
            mean = _goal_mean(model, xy)
            sims.append(SimState(truth=mean.copy(),
                                 belief=GaussianBelief(
                                     mean=mean,
                                     cov=1e-4 * np.eye(model.state_dim))))
        world = WorldState(
            base_packages=[generate_packages(rng, cfg) for _ in cfg.bases],
            positions=[s.belief.mean[:2].copy() for s in sims],
            carrying=[None] * 3,
            pending_refill=[0] * len(cfg.bases))
        world.created = sum(1 for p in world.base_packages if p.present)
        config = JointConfig(sims=sims, statuses=[AgentStatus() for _ in range(3)],
                             e_state=None, world=world)
        config.e_state = self._estate_tuple(world)
        return config

    # ----- geometry helpers -----------------------------------------------
    def _pos(self, agent: int, config: JointConfig) -> np.ndarray:
        return config.sims[agent].belief.mean[:2]

    def _at(self, agent: int, xy, config: JointConfig) -> bool:
        return bool(np.linalg.norm(self._pos(agent, config) - np.asarray(xy))
                    <= self.cfg.site_radius)

    def _base_at(self, agent: int, config: JointConfig) -> Optional[int]:
        for j, xy in enumerate(self.cfg.bases):
            if self._at(agent, xy, config):
                return j
        return None

    def _colocated(self, a: int, b: int, config: JointConfig) -> bool:
        return bool(np.linalg.norm(self._pos(a, config) - self._pos(b, config))
                    <= self.cfg.colocate_radius + self.cfg.site_radius)

    # ----- observations -----------------------------------------------------
    def observe(self, agent: int, config: JointConfig) -> str:
        world: WorldState = config.world
        for i in range(self.n_agents):
            world.positions[i] = self._pos(i, config).copy()
        return observe_estate(agent, world, self)

    def _estate_tuple(self, world: WorldState) -> Hashable:
        return (tuple((p.size, p.destination) for p in world.base_packages),
                world.carrying[2] is not None)

    # ----- initiation predicates -------------------------------------------
    def initiation_ok(self, agent: int, tma_id: str,
                      config: JointConfig) -> bool:
        world: WorldState = config.world
        kind = self.kinds[agent].kind
        if tma_id not in self._rosters[agent]:
            return False
        carrying_joint = world.joint_carry is not None and kind == AIR
        if tma_id == "wait":
            return True
        if tma_id.startswith("goto-") and not tma_id.startswith("joint-"):
            # solo movement is unavailable while sharing a large package
            return not carrying_joint
        if tma_id.startswith("joint-goto-dest-"):
            dest = "d" + tma_id[-1]
            return (world.joint_carry is not None
                    and world.joint_carry.destination == dest)
        if tma_id == "pickup":
            j = self._base_at(agent, config)
            return (j is not None and world.carrying[agent] is None
                    and not carrying_joint
                    and world.base_packages[j].size == 1)
        if tma_id == "joint-pickup":
            j = self._base_at(agent, config)
            if j is None or world.base_packages[j].size != 2:
                return False
            if world.carrying[agent] is not None or carrying_joint:
                return False
            other = 1 - agent if agent in (0, 1) else None
            return other is not None and self._colocated(agent, other, config)
        if tma_id == "putdown":
            return world.carrying[agent] is not None
        if tma_id == "joint-putdown":
            other = 1 - agent if agent in (0, 1) else None
            return (world.joint_carry is not None and other is not None
                    and self._colocated(agent, other, config))
        if tma_id == "place-on-truck":
            pkg = world.carrying[agent]
            return (kind == AIR and pkg is not None
                    and pkg.destination == "dr"
                    and self._at(agent, self.cfg.rendezvous, config)
                    and self._colocated(agent, 2, config)
                    and world.carrying[2] is None)
        return True

    # ----- execution construction -------------------------------------------
    def begin_executions(self, assigned: Dict[int, str], config: JointConfig,
                         rng: np.random.Generator) -> List[Execution]:
        out: List[Execution] = []
        joint_groups: Dict[str, List[int]] = {}
        for agent, tid in sorted(assigned.items()):
            spec = self._rosters[agent][tid]
            if spec.agents_required == 2:
                joint_groups.setdefault(tid, []).append(agent)
                continue
            if spec.tma is not None:
                out.append(GraphTmaExecution(spec, agent, config))
            else:
                out.append(TimedExecution(spec, [agent]))
        for tid, members in joint_groups.items():
            spec = self._rosters[members[0]][tid]
            if len(members) != spec.agents_required:
                raise ConfigError(
                    f"joint macro-action {tid} assigned to {len(members)} agents")
            if spec.tma is not None:
                out.append(JointGraphExecution(spec, members, config))
            else:
                out.append(TimedExecution(spec, members))
        return out

    # ----- rewards and environmental dynamics --------------------------------
    def team_reward(self, events: List, config: JointConfig) -> float:
        total = 0.0
        for name, agents in events:
            if name in ("putdown", "joint-putdown"):
                total += self._drop_bonus(name, agents, config)
        return total

    def _drop_bonus(self, name: str, agents, config: JointConfig) -> float:
        world: WorldState = config.world
        pkg = (world.joint_carry if name == "joint-putdown"
               else world.carrying[agents[0]])
        if pkg is None:
            return 0.0
        dest_xy = self.cfg.dests[pkg.destination]
        if all(self._at(a, dest_xy, config) for a in agents):
            return self.cfg.delivery_bonus
        return 0.0

    def e_dynamics(self, events: List, config: JointConfig,
                   rng: np.random.Generator) -> None:
        world: WorldState = config.world
        cfg = self.cfg
        # refills drawn one macro decision epoch after the pickup
        for j in range(len(cfg.bases)):
            if world.pending_refill[j] == 1 and not world.base_packages[j].present:
                world.base_packages[j] = generate_packages(rng, cfg)
                if world.base_packages[j].present:
                    world.created += 1
                world.pending_refill[j] = 0
            elif world.pending_refill[j] > 1:
                world.pending_refill[j] -= 1

        for name, agents in events:
            if name == "pickup":
                a = agents[0]
                j = self._base_at(a, config)
                if (j is not None and world.base_packages[j].size == 1
                        and world.carrying[a] is None):
                    world.carrying[a] = world.base_packages[j]
                    world.base_packages[j] = EMPTY
                    world.pending_refill[j] = 2
            elif name == "joint-pickup":
                a = agents[0]
                j = self._base_at(a, config)
                if (j is not None and world.base_packages[j].size == 2
                        and world.joint_carry is None):
                    world.joint_carry = world.base_packages[j]
                    world.base_packages[j] = EMPTY
                    world.pending_refill[j] = 2
            elif name == "putdown":
                a = agents[0]
                pkg = world.carrying[a]
                if pkg is not None:
                    world.carrying[a] = None
                    self._settle_drop(pkg, agents, config)
            elif name == "joint-putdown":
                pkg = world.joint_carry
                if pkg is not None:
                    world.joint_carry = None
                    self._settle_drop(pkg, agents, config)
            elif name == "place-on-truck":
                a = agents[0]
                pkg = world.carrying[a]
                if (pkg is not None and world.carrying[2] is None
                        and self._at(a, cfg.rendezvous, config)
                        and self._colocated(a, 2, config)):
                    world.carrying[a] = None
                    world.carrying[2] = pkg
        config.e_state = self._estate_tuple(world)
        assert world.audit_ok(), "package conservation violated"

    def _settle_drop(self, pkg: PackageDescriptor, agents,
                     config: JointConfig) -> None:
        world: WorldState = config.world
        dest_xy = self.cfg.dests[pkg.destination]
        if all(self._at(a, dest_xy, config) for a in agents):
            world.delivered[pkg.destination] += 1
            world.dropped_ok += 1
        else:
            world.dropped_lost += 1


def observe_estate(agent: int, world: WorldState,
                   domain: DeliveryDomain) -> str:
    """Locally observable environmental observation class for one robot."""
    cfg = domain.cfg
    pos = world.positions[agent]
    carried = world.carrying[agent]
    if carried is None and world.joint_carry is not None \
            and domain.kinds[agent].kind == AIR:
        carried = world.joint_carry
    if carried is not None:
        return f"s-{carried.destination}"
    for j, xy in enumerate(cfg.bases):
        if np.linalg.norm(pos - np.asarray(xy)) <= cfg.site_radius:
            pkg = world.base_packages[j]
            if not pkg.present:
                return "empty"
            if pkg.size == 1:
                return f"s-{pkg.destination}"
            nearby = any(
                i != agent and domain.kinds[i].kind == AIR
                and np.linalg.norm(world.positions[i] - np.asarray(xy))
                <= cfg.site_radius
                for i in range(domain.n_agents))
            return "L-a" if nearby else "L-m"
    if np.linalg.norm(pos - np.asarray(cfg.rendezvous)) <= cfg.site_radius:
        others = [i for i in range(domain.n_agents) if i != agent
                  and domain.kinds[i].kind != domain.kinds[agent].kind]
        near = any(np.linalg.norm(world.positions[i]
                                  - np.asarray(cfg.rendezvous))
                   <= cfg.site_radius for i in others)
        return "rv-a" if near else "rv-m"
    return "none"


def delivery_reward(event, config: JointConfig, domain: DeliveryDomain) -> float:
    """Team reward for a single put-down event (bonus iff at the package's
    destination); exposed for scripted-scenario tests."""
    name, agents = event
    if name not in ("putdown", "joint-putdown"):
        return 0.0
    return domain._drop_bonus(name, agents, config)


def total_delivered(config: JointConfig) -> int:
    return sum(config.world.delivered.values())


def success_curve(policy, domain: DeliveryDomain, n_runs: int, horizon: int,
                  rng: np.random.Generator) -> List[Tuple[int, float]]:
    """P(deliver >= k packages) over seeded runs, for k = 0..max observed.
    Non-increasing in k by construction."""
    from .decposmdp import run_rollout
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    counts = [total_delivered(run_rollout(policy, domain, horizon, sub).final)
              for sub in rng.spawn(n_runs)]
    k_max = max(counts)
    return [(k, sum(1 for c in counts if c >= k) / n_runs)
            for k in range(k_max + 1)]


def build_domain(cfg: DeliveryConfig,
                 rng: Optional[np.random.Generator] = None) -> DeliveryDomain:
    """Construct the delivery domain, building all movement TMA graphs."""
    if rng is None:
        rng = np.random.default_rng(0)
    return DeliveryDomain(cfg, rng)


def base_estate(world: WorldState, j: int, domain: DeliveryDomain) -> BaseEState:
    """Snapshot (package, nearby flag) e-state of base j."""
    xy = np.asarray(domain.cfg.bases[j])
    n_near = sum(1 for p in world.positions
                 if np.linalg.norm(p - xy) <= domain.cfg.site_radius)
    return BaseEState(package=world.base_packages[j],
                      nearby=1 if n_near >= 2 else 0)
