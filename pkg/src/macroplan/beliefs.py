"""Gaussian belief propagation and local belief-space feedback controllers.

A local macro-action (LMA) pairs a stationary Kalman filter with a linear
feedback law ``u = -L (mean - target)``.  Under a stabilizing gain the closed
loop contracts a neighborhood of beliefs onto an attractor belief whose
covariance is the Riccati fixed point of the filter, so the controller acts
as a funnel in belief space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import NonConvergent, Unstabilizable


@dataclass(frozen=True)
class StepCost:
    """Per-step reward ``-(base + u_weight * ||u||^2)``.

    Kept as a small serializable structure instead of a bare callable so
    models can round-trip through config files.
    """

    base: float = 0.0
    u_weight: float = 0.0

    def __call__(self, x: np.ndarray, u: np.ndarray) -> float:
        return -(self.base + self.u_weight * float(u @ u))

    def to_dict(self) -> dict:
        return {"base": self.base, "u_weight": self.u_weight}

    @classmethod
    def from_dict(cls, d: dict) -> "StepCost":
        return cls(base=d["base"], u_weight=d["u_weight"])


class Constraints:
    """State-constraint predicate; ``violates(x) == True`` means failure."""

    def violates(self, x: np.ndarray) -> bool:  # pragma: no cover - interface
        raise NotImplementedError

    def to_dict(self) -> dict:  # pragma: no cover - interface
        raise NotImplementedError

    @staticmethod
    def from_dict(d: dict) -> "Constraints":
        kind = d["kind"]
        if kind == "none":
            return NoConstraints()
        if kind == "rects":
            return RectConstraints(
                rects=[tuple(map(tuple, r)) for r in d["rects"]],
                bounds=tuple(map(tuple, d["bounds"])) if d.get("bounds") else None,
            )
        raise ValueError(f"unknown constraint kind {kind!r}")


class NoConstraints(Constraints):
    def violates(self, x: np.ndarray) -> bool:
        return False

    def to_dict(self) -> dict:
        return {"kind": "none"}


class RectConstraints(Constraints):
    """Union of axis-aligned forbidden rectangles over the leading two state
    dimensions, plus optional workspace bounds (outside = violation)."""

    def __init__(self, rects: Sequence[tuple] = (), bounds: Optional[tuple] = None):
        self.rects = [((float(lo[0]), float(lo[1])), (float(hi[0]), float(hi[1])))
                      for lo, hi in rects]
        self.bounds = None
        if bounds is not None:
            (blo, bhi) = bounds
            self.bounds = ((float(blo[0]), float(blo[1])), (float(bhi[0]), float(bhi[1])))

    def violates(self, x: np.ndarray) -> bool:
        px, py = float(x[0]), float(x[1])
        if self.bounds is not None:
            (blo, bhi) = self.bounds
            if not (blo[0] <= px <= bhi[0] and blo[1] <= py <= bhi[1]):
                return True
        for (lo, hi) in self.rects:
            if lo[0] <= px <= hi[0] and lo[1] <= py <= hi[1]:
                return True
        return False

    def to_dict(self) -> dict:
        return {"kind": "rects", "rects": [list(map(list, r)) for r in self.rects],
                "bounds": list(map(list, self.bounds)) if self.bounds else None}


class PredicateConstraints(Constraints):
    """Arbitrary predicate; not serializable, for in-process use."""

    def __init__(self, fn: Callable[[np.ndarray], bool]):
        self.fn = fn

    def violates(self, x: np.ndarray) -> bool:
        return bool(self.fn(x))


def _check_symmetric(m: np.ndarray, name: str, tol: float = 1e-9) -> None:
    if not np.allclose(m, m.T, atol=tol):
        raise ValueError(f"{name} must be symmetric")


@dataclass
class LinearGaussianModel:
    """Discrete-time linear-Gaussian dynamics and observation model.

    x' = A x + G u + w,  w ~ N(0, Q)
    z  = C x + v,        v ~ N(0, R_obs)
    """

    A: np.ndarray
    G: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R_obs: np.ndarray
    step_cost: StepCost = field(default_factory=StepCost)
    constraints: Constraints = field(default_factory=NoConstraints)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R_obs = np.atleast_2d(np.asarray(self.R_obs, dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        if self.G.shape[0] != n:
            raise ValueError("G row count must match state dim")
        if self.C.shape[1] != n:
            raise ValueError("C column count must match state dim")
        if self.Q.shape != (n, n):
            raise ValueError("Q must be state_dim x state_dim")
        m = self.C.shape[0]
        if self.R_obs.shape != (m, m):
            raise ValueError("R_obs must be obs_dim x obs_dim")
        _check_symmetric(self.Q, "Q")
        _check_symmetric(self.R_obs, "R_obs")
        if np.min(np.linalg.eigvalsh(self.Q)) < -1e-10:
            raise ValueError("Q must be PSD")
        if np.min(np.linalg.eigvalsh(self.R_obs)) <= 0:
            raise ValueError("R_obs must be PD")
        # noise square roots, computed once per model
        self._sq = _psd_sqrt(self.Q)
        self._sr = _psd_sqrt(self.R_obs)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def control_dim(self) -> int:
        return self.G.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.C.shape[0]

    def constraint_set(self, x: np.ndarray) -> bool:
        return self.constraints.violates(x)

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(), "G": self.G.tolist(), "C": self.C.tolist(),
            "Q": self.Q.tolist(), "R_obs": self.R_obs.tolist(),
            "step_cost": self.step_cost.to_dict(),
            "constraints": self.constraints.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearGaussianModel":
        return cls(
            A=np.array(d["A"]), G=np.array(d["G"]), C=np.array(d["C"]),
            Q=np.array(d["Q"]), R_obs=np.array(d["R_obs"]),
            step_cost=StepCost.from_dict(d["step_cost"]),
            constraints=Constraints.from_dict(d["constraints"]),
        )


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    w = np.clip(w, 0.0, None)
    return v @ np.diag(np.sqrt(w)) @ v.T


@dataclass(frozen=True)
class GaussianBelief:
    """Mean/covariance pair over one agent's state."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).ravel())
        object.__setattr__(self, "cov", np.atleast_2d(np.asarray(self.cov, dtype=float)))
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.cov))):
            raise ValueError("belief entries must be finite")
        _check_symmetric(self.cov, "cov", tol=1e-8)

    @classmethod
    def _trusted(cls, mean: np.ndarray, cov: np.ndarray) -> "GaussianBelief":
        """Validation-free constructor for hot simulation loops whose inputs
        are already float arrays with symmetrized covariances."""
        b = object.__new__(cls)
        object.__setattr__(b, "mean", mean)
        object.__setattr__(b, "cov", cov)
        return b


@dataclass(frozen=True)
class BeliefNorm:
    """Weighted distance between beliefs: Euclidean on means plus Frobenius
    on covariances.  The milestone membership test uses this norm."""

    w_mean: float = 1.0
    w_cov: float = 0.1

    def distance(self, b: GaussianBelief, c: GaussianBelief) -> float:
        dm = float(np.linalg.norm(b.mean - c.mean))
        dc = float(np.linalg.norm(b.cov - c.cov))
        return self.w_mean * dm + self.w_cov * dc

    def to_dict(self) -> dict:
        return {"w_mean": self.w_mean, "w_cov": self.w_cov}

    @classmethod
    def from_dict(cls, d: dict) -> "BeliefNorm":
        return cls(w_mean=d["w_mean"], w_cov=d["w_cov"])


@dataclass(frozen=True)
class LmaParams:
    gain: np.ndarray   # control x state feedback gain
    target: np.ndarray  # desired state mean

    def __post_init__(self):
        object.__setattr__(self, "gain", np.atleast_2d(np.asarray(self.gain, dtype=float)))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float).ravel())


@dataclass(frozen=True)
class Lma:
    """Local macro-action: feedback gain, stationary filter gain, attractor."""

    params: LmaParams
    kalman_gain: np.ndarray
    attractor: GaussianBelief

    def control(self, belief_mean: np.ndarray) -> np.ndarray:
        return -self.params.gain @ (belief_mean - self.params.target)


@dataclass
class SimState:
    """Single-owner rollout state: ground truth plus the filtered belief."""

    truth: np.ndarray
    belief: GaussianBelief
    elapsed: int = 0
    accrued_reward: float = 0.0


@dataclass(frozen=True)
class GainSpec:
    """Gain design family: discrete LQR weights, or an explicit fixed gain."""

    kind: str = "lqr"                       # "lqr" | "fixed"
    state_weight: float = 1.0
    control_weight: float = 1.0
    fixed_gain: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "state_weight": self.state_weight,
                "control_weight": self.control_weight,
                "fixed_gain": None if self.fixed_gain is None else np.asarray(self.fixed_gain).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GainSpec":
        fg = d.get("fixed_gain")
        return cls(kind=d["kind"], state_weight=d["state_weight"],
                   control_weight=d["control_weight"],
                   fixed_gain=None if fg is None else np.array(fg))


def stationary_covariance(model: LinearGaussianModel, tol: float = 1e-12,
                          max_iter: int = 100_000) -> np.ndarray:
    """Posterior covariance fixed point of the Kalman filter, by fixed-point
    iteration of the measurement-updated Riccati recurrence."""
    n = model.state_dim
    A, C, Q, R = model.A, model.C, model.Q, model.R_obs
    P = Q + np.eye(n)
    for _ in range(max_iter):
        Pm = A @ P @ A.T + Q
        S = C @ Pm @ C.T + R
        K = np.linalg.solve(S.T, (Pm @ C.T).T).T
        ikc = np.eye(n) - K @ C
        P_next = ikc @ Pm @ ikc.T + K @ R @ K.T  # Joseph form keeps PSD
        if np.max(np.abs(P_next - P)) <= tol:
            P_next = 0.5 * (P_next + P_next.T)
            return P_next
        P = P_next
    raise NonConvergent(
        f"Riccati iteration did not converge in {max_iter} iterations "
        f"(last delta {np.max(np.abs(P_next - P)):.3e})")


def stationary_kalman_gain(model: LinearGaussianModel,
                           posterior_cov: np.ndarray) -> np.ndarray:
    """Steady-state filter gain associated with the posterior fixed point."""
    Pm = model.A @ posterior_cov @ model.A.T + model.Q
    S = model.C @ Pm @ model.C.T + model.R_obs
    return np.linalg.solve(S.T, (Pm @ model.C.T).T).T


def design_lma(model: LinearGaussianModel, target: np.ndarray,
               gain_spec: GainSpec = GainSpec()) -> Lma:
    """Design a funnel controller toward ``target``.

    Raises Unstabilizable if the resulting closed loop has spectral
    radius >= 1.
    """
    target = np.asarray(target, dtype=float).ravel()
    if gain_spec.kind == "fixed":
        if gain_spec.fixed_gain is None:
            raise ValueError("fixed gain spec requires fixed_gain")
        L = np.atleast_2d(np.asarray(gain_spec.fixed_gain, dtype=float))
    elif gain_spec.kind == "lqr":
        n, m = model.state_dim, model.control_dim
        Qw = gain_spec.state_weight * np.eye(n)
        Rw = gain_spec.control_weight * np.eye(m)
        try:
            X = scipy.linalg.solve_discrete_are(model.A, model.G, Qw, Rw)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as e:
            raise Unstabilizable(f"LQR design failed: {e}") from e
        L = np.linalg.solve(Rw + model.G.T @ X @ model.G, model.G.T @ X @ model.A)
    else:
        raise ValueError(f"unknown gain spec kind {gain_spec.kind!r}")

    closed = model.A - model.G @ L
    rho = np.max(np.abs(np.linalg.eigvals(closed)))
    if rho >= 1.0:
        raise Unstabilizable(f"closed-loop spectral radius {rho:.4f} >= 1")
    p_post = stationary_covariance(model)
    kg = stationary_kalman_gain(model, p_post)
    return Lma(params=LmaParams(gain=L, target=target), kalman_gain=kg,
               attractor=GaussianBelief(mean=target, cov=p_post))


def lma_step(lma: Lma, sim: SimState, model: LinearGaussianModel,
             rng: np.random.Generator) -> SimState:
    """Advance truth and belief one step under the LMA; mutates ``sim``."""
    u = lma.control(sim.belief.mean)
    sim.accrued_reward += model.step_cost(sim.truth, u)

    w = model._sq @ rng.standard_normal(model.state_dim)
    truth = model.A @ sim.truth + model.G @ u + w
    v = model._sr @ rng.standard_normal(model.obs_dim)
    z = model.C @ truth + v

    # Kalman predict + update (time-varying exact filter)
    mp = model.A @ sim.belief.mean + model.G @ u
    Pm = model.A @ sim.belief.cov @ model.A.T + model.Q
    S = model.C @ Pm @ model.C.T + model.R_obs
    K = np.linalg.solve(S.T, (Pm @ model.C.T).T).T
    mean = mp + K @ (z - model.C @ mp)
    ikc = np.eye(model.state_dim) - K @ model.C
    cov = ikc @ Pm @ ikc.T + K @ model.R_obs @ K.T
    cov = 0.5 * (cov + cov.T)

    sim.truth = truth
    sim.belief = GaussianBelief._trusted(mean, cov)
    sim.elapsed += 1
    return sim


@dataclass(frozen=True)
class TerminationRecord:
    """Result of running an LMA to completion."""

    outcome: str          # "landed" | "failed" | "timeout"
    region_id: Optional[int]
    elapsed_steps: int
    accrued_reward: float

    LANDED = "landed"
    FAILED = "failed"
    TIMEOUT = "timeout"


def run_lma(lma: Lma, start: SimState, stop_regions: Sequence,
            model: LinearGaussianModel, max_steps: int,
            rng: np.random.Generator,
            norm: BeliefNorm = BeliefNorm()) -> TerminationRecord:
    """Run the funnel until the belief enters a stop region, the truth
    violates the constraint set (failure node, region id 0), or max_steps.

    ``stop_regions`` items need ``id``, ``center`` (GaussianBelief) and
    ``epsilon`` attributes; the failure check comes from the model.
    """
    if max_steps <= 0:
        raise ValueError("max_steps must be positive")
    if not stop_regions:
        raise ValueError("stop_regions must be non-empty")
    sim = start
    start_elapsed = sim.elapsed
    start_reward = sim.accrued_reward
    while True:
        for region in stop_regions:
            if norm.distance(sim.belief, region.center) <= region.epsilon:
                return TerminationRecord(
                    outcome=TerminationRecord.LANDED, region_id=region.id,
                    elapsed_steps=sim.elapsed - start_elapsed,
                    accrued_reward=sim.accrued_reward - start_reward)
        if sim.elapsed - start_elapsed >= max_steps:
            return TerminationRecord(
                outcome=TerminationRecord.TIMEOUT, region_id=None,
                elapsed_steps=sim.elapsed - start_elapsed,
                accrued_reward=sim.accrued_reward - start_reward)
        lma_step(lma, sim, model, rng)
        if model.constraint_set(sim.truth):
            return TerminationRecord(
                outcome=TerminationRecord.FAILED, region_id=0,
                elapsed_steps=sim.elapsed - start_elapsed,
                accrued_reward=sim.accrued_reward - start_reward)
