"""Command-line harness: build TMAs, run policy searches, and write the
experiment artifacts (policies, value traces, success curves) as CSV/JSON.

Exit codes: 0 success, 2 configuration error, 3 infeasible problem
(unreachable goal or empty successor sets).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from typing import Optional

import numpy as np
import yaml

from .beliefs import GaussianBelief, GainSpec, LinearGaussianModel
from .delivery import (DeliveryConfig, build_domain, desk_config,
                       success_curve)
from .errors import ConfigError, GoalUnreachable, NoValidSuccessor
from .search import (SearchConfig, load_policy, mmcs, monte_carlo_search,
                     save_policy, write_value_trace)
from .tma import TmaConfig, construct_tma, load_tma, save_tma

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3


def _load_yaml(path: str) -> dict:
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def _config_hash(data: dict) -> str:
    blob = json.dumps(data, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_report(path: str, **fields) -> None:
    with open(path, "w") as f:
        json.dump(fields, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v
                        for v in row])


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def _tma_setup(data: dict):
    try:
        model = LinearGaussianModel.from_dict(data["model"])
        start = GaussianBelief(mean=np.array(data["start"]["mean"], dtype=float),
                               cov=np.array(data["start"]["cov"], dtype=float))
        goal = np.array(data["goal_mean"], dtype=float)
        t = dict(data.get("tma", {}))
        if "gain_spec" in t:
            t["gain_spec"] = GainSpec.from_dict(t["gain_spec"])
        for key in ("bounds_lo", "bounds_hi"):
            if key in t:
                t[key] = np.array(t[key], dtype=float)
        cfg = TmaConfig(**t)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad TMA config: {e}") from e
    return model, start, goal, cfg


def _delivery_config(data: dict) -> DeliveryConfig:
    preset = data.get("preset", "desk")
    if preset == "desk":
        base = desk_config()
    elif preset == "default":
        base = DeliveryConfig()
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    overrides = {k: v for k, v in data.items()
                 if k not in ("preset", "search")}
    try:
        for key, val in overrides.items():
            if not hasattr(base, key):
                raise ConfigError(f"unknown delivery config key {key!r}")
            current = getattr(base, key)
            if isinstance(current, tuple):
                val = tuple(tuple(x) if isinstance(x, list) else x for x in val)
            if isinstance(current, dict):
                fixed = {}
                for k, p in val.items():
                    if isinstance(k, str) and "," in k:
                        size, dest = k.split(",")
                        fixed[(int(size), dest.strip())] = p
                    else:
                        fixed[k] = p
                val = fixed
            setattr(base, key, val)
        base.__post_init__()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad delivery config: {e}") from e
    return base


def _search_config(data: dict, cfg: DeliveryConfig,
                   budget: Optional[int]) -> SearchConfig:
    s = dict(data.get("search", {}))
    s.setdefault("n_rollouts", cfg.n_rollouts)
    s.setdefault("horizon_macro_steps", cfg.horizon_macro_steps)
    if budget is not None:
        s["budget"] = budget
    try:
        return SearchConfig(**s)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad search config: {e}") from e


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_build_tma(args) -> int:
    data = _load_yaml(args.config)
    model, start, goal, tcfg = _tma_setup(data)
    if args.threads:
        tcfg.threads = args.threads
    rng = np.random.default_rng(args.seed)
    t0 = time.time()
    tma = construct_tma(start, goal, model, tcfg, rng)
    save_tma(tma, args.out)
    _write_report(args.out + ".report.json", seed=args.seed,
                  config_hash=_config_hash(data),
                  wall_time_s=round(time.time() - t0, 3),
                  success_from_start=tma.success[tma.start_id],
                  expected_time_from_start=tma.time_to_goal[tma.start_id])
    print(f"wrote {args.out}  success(start)={tma.success[tma.start_id]:.4f}")
    return EXIT_OK


def _run_search(args, algorithm, name: str) -> int:
    data = _load_yaml(args.config)
    cfg = _delivery_config(data)
    scfg = _search_config(data, cfg, args.budget)
    rng = np.random.default_rng(args.seed)
    domain = build_domain(cfg, rng.spawn(1)[0])
    t0 = time.time()
    result = algorithm(domain, scfg, rng)
    os.makedirs(args.out, exist_ok=True)
    save_policy(result.best_policy, os.path.join(args.out, f"{name}_policy.json"))
    write_value_trace(result.trace, os.path.join(args.out, f"{name}_trace.csv"))
    _write_csv(os.path.join(args.out, f"{name}_samples.csv"),
               ["evaluation", "value"], result.samples)
    _write_report(os.path.join(args.out, f"{name}_report.json"),
                  seed=args.seed, config_hash=_config_hash(data),
                  wall_time_s=round(time.time() - t0, 3),
                  best_value=result.best_value,
                  evaluations=result.evaluations)
    print(f"{name}: best value {result.best_value:.3f} "
          f"over {result.evaluations} evaluations")
    return EXIT_OK


def cmd_solve(args) -> int:
    return _run_search(args, mmcs, "mmcs")


def cmd_mc_baseline(args) -> int:
    return _run_search(args, monte_carlo_search, "mc")


def cmd_compare_search(args) -> int:
    data = _load_yaml(args.config)
    cfg = _delivery_config(data)
    scfg = _search_config(data, cfg, args.budget)
    n_seeds = args.seeds
    domain = build_domain(cfg, np.random.default_rng(args.seed).spawn(1)[0])
    os.makedirs(args.out, exist_ok=True)
    t0 = time.time()
    summary = []
    for i in range(n_seeds):
        seed_i = args.seed + i
        a = mmcs(domain, scfg, np.random.default_rng(seed_i))
        b = monte_carlo_search(domain, scfg, np.random.default_rng(seed_i))
        write_value_trace(a.trace,
                          os.path.join(args.out, f"mmcs_trace_{i}.csv"))
        write_value_trace(b.trace,
                          os.path.join(args.out, f"mc_trace_{i}.csv"))
        _write_csv(os.path.join(args.out, f"scatter_{i}.csv"),
                   ["evaluation", "mmcs_value", "mc_value"],
                   [(e, va, vb) for (e, va), (_, vb)
                    in zip(a.samples, b.samples)])
        summary.append((i, a.best_value, b.best_value))
    _write_csv(os.path.join(args.out, "summary.csv"),
               ["seed_index", "mmcs_best", "mc_best"], summary)
    wins = sum(1 for _, a, b in summary if a >= b)
    _write_report(os.path.join(args.out, "report.json"),
                  seed=args.seed, seeds=n_seeds,
                  config_hash=_config_hash(data),
                  wall_time_s=round(time.time() - t0, 3),
                  mmcs_wins=wins)
    print(f"compare-search: MMCS won {wins}/{n_seeds} paired seeds")
    return EXIT_OK


def cmd_success_curve(args) -> int:
    data = _load_yaml(args.config)
    cfg = _delivery_config(data)
    domain = build_domain(cfg, np.random.default_rng(args.seed).spawn(1)[0])
    policy = load_policy(args.policy)
    _check_policy(policy, domain)
    n_runs = args.budget if args.budget is not None else 250
    rng = np.random.default_rng(args.seed)
    curve = success_curve(policy, domain, n_runs, cfg.horizon_macro_steps, rng)
    _write_csv(args.out, ["k", "p_deliver_at_least_k"], curve)
    print(f"wrote {args.out} ({len(curve)} rows, n_runs={n_runs})")
    return EXIT_OK


def _check_policy(policy, domain) -> None:
    """Validate controller invariants against the domain; raises on failure."""
    if len(policy.controllers) != domain.n_agents:
        raise ConfigError(f"policy has {len(policy.controllers)} controllers, "
                          f"domain has {domain.n_agents} agents")
    alphabet = domain.obs_alphabet()
    for agent, c in enumerate(policy.controllers):
        roster = domain.roster(agent)
        n = len(c.nodes)
        for i, label in enumerate(c.nodes):
            if label not in roster:
                raise ConfigError(
                    f"agent {agent} node {i}: unknown macro-action {label!r}")
            for obs in alphabet:
                if (i, obs) not in c.edges:
                    raise ConfigError(
                        f"agent {agent} node {i}: missing edge for {obs!r}")
                t = c.edges[(i, obs)]
                if not (0 <= t < n):
                    raise ConfigError(
                        f"agent {agent} node {i}: edge target {t} out of range")
                succ = domain.valid_successors(agent, label, obs)
                if c.nodes[t] not in succ:
                    raise NoValidSuccessor(
                        f"agent {agent}: {label!r} --{obs!r}--> "
                        f"{c.nodes[t]!r} violates initiation compatibility")


def cmd_validate_policy(args) -> int:
    data = _load_yaml(args.config)
    cfg = _delivery_config(data)
    domain = build_domain(cfg, np.random.default_rng(args.seed).spawn(1)[0])
    policy = load_policy(args.policy)
    _check_policy(policy, domain)
    print(f"{args.policy}: valid for this domain")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="macroplan",
        description="Belief-space macro-action planning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--budget", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", required=True)
        for flag, kw in extra.items():
            p.add_argument(flag, **kw)
        p.set_defaults(fn=fn)
        return p

    add("build-tma", cmd_build_tma)
    add("solve", cmd_solve)
    add("mc-baseline", cmd_mc_baseline)
    add("compare-search", cmd_compare_search,
        **{"--seeds": dict(type=int, default=20)})
    add("success-curve", cmd_success_curve,
        **{"--policy": dict(required=True)})
    vp = sub.add_parser("validate-policy")
    vp.add_argument("--config", required=True)
    vp.add_argument("--seed", type=int, default=0)
    vp.add_argument("--policy", required=True)
    vp.set_defaults(fn=cmd_validate_policy)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (GoalUnreachable, NoValidSuccessor) as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
