"""Gridworld experiment protocols shared by the scripts, the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from idrl.correction import CorrectionConfig
from idrl.data import (GridworldSpec, collect_policy, collect_random, make_gridworld, mix_datasets,
                       normalize_rewards, shortest_path_length)
from idrl.divergence import DivergenceSpec
from idrl.driver import (BCConfig, DiscriminatorConfig, IDRLConfig, behavior_cloning, evaluate_policy,
                         optimal_dwbc, run_idrl)
from idrl.dual import DualConfig
from idrl.nn import BackendConfig
from idrl.oracle import exact_visitation, policy_return, value_iteration


def success_rate(result, max_len):
    """Fraction of episodes that terminated at the goal within ``max_len`` steps."""
    return float(np.mean(result.reached & (result.lengths <= max_len)))


def oracle_return(spec: GridworldSpec):
    """Undiscounted and discounted return of the value-iteration policy from the start."""
    env, mdp = make_gridworld(spec)
    _, _, pi = value_iteration(mdp)
    d = exact_visitation(mdp, pi)
    discounted = float((d * mdp.R).sum() / (1.0 - mdp.gamma))
    assert abs(discounted - policy_return(mdp, pi)) < 1e-9
    return spec.goal_reward + spec.step_reward * (shortest_path_length(spec) - 1), discounted


@dataclass
class ToycaseConfig:
    spec: GridworldSpec = field(default_factory=GridworldSpec)
    n_transitions: int = 500
    reward_shift: float = 3.0
    idrl: IDRLConfig = field(default_factory=lambda: IDRLConfig(
        M=2, spec=DivergenceSpec(lam=0.6),
        dual=DualConfig(steps=5000, batch_size=None, lr=0.1, lr_schedule="linear", tau=0.05,
                        log_every=500),
        correction=CorrectionConfig(steps=5000, batch_size=None, lr=0.1, beta1=0.0,
                                    lr_schedule="linear", log_every=500),
        bc=BCConfig(steps=5000),
        backend=BackendConfig("tabular")))
    episodes: int = 100
    slack: int = 2


def run_toycase(seed, cfg: ToycaseConfig = ToycaseConfig(), ratio_mode="corrected", M=None):
    """Collect random data, run the loop, roll out deterministically from the start."""
    env, _ = make_gridworld(cfg.spec)
    data = collect_random(env, cfg.n_transitions, seed)
    train = normalize_rewards(data, "shift", cfg.reward_shift) if cfg.reward_shift else data
    icfg = replace(cfg.idrl, seed=seed, ratio_mode=ratio_mode, M=cfg.idrl.M if M is None else M)
    res = run_idrl(train, icfg, env=env, disc=env)
    ev = evaluate_policy(env, res.policy, cfg.episodes, seed + 10_000, deterministic=True)
    limit = shortest_path_length(cfg.spec) + cfg.slack
    return {"result": res, "eval": ev, "success": success_rate(ev, limit), "data": data}


def toycase_seeds(k, cfg: ToycaseConfig = ToycaseConfig(), start=0):
    """First ``k`` seeds whose random dataset contains at least one goal arrival.

    Without a goal transition no weighting of the data can produce a policy
    that reaches the goal, so such seeds say nothing about the loop.
    """
    env, _ = make_gridworld(cfg.spec)
    seeds, seed = [], start
    while len(seeds) < k:
        if collect_random(env, cfg.n_transitions, seed).done.any():
            seeds.append(seed)
        seed += 1
    return seeds


@dataclass
class CorruptedConfig:
    spec: GridworldSpec = field(default_factory=GridworldSpec)
    total: int = 10_000
    expert_ratio: float = 0.05
    expert_pool: int = 2_000
    reward_shift: float = 3.0
    idrl: IDRLConfig = field(default_factory=lambda: IDRLConfig(
        M=2, spec=DivergenceSpec(lam=0.6),
        dual=DualConfig(steps=3000, batch_size=None, lr=0.1, lr_schedule="linear", tau=0.05,
                        log_every=500),
        correction=CorrectionConfig(steps=3000, batch_size=None, lr=0.1, beta1=0.0,
                                    lr_schedule="linear", log_every=500),
        bc=BCConfig(steps=5000),
        backend=BackendConfig("tabular")))
    episodes: int = 50
    deterministic_eval: bool = True
    dwbc_delta: float = 1.0
    held_out_expert: int = 500


def corrupted_data(seed, cfg: CorruptedConfig):
    """The mixed dataset and a disjoint held-out expert dataset."""
    env, mdp = make_gridworld(cfg.spec)
    _, _, pi = value_iteration(mdp)
    ss = np.random.SeedSequence(seed).spawn(4)
    s_exp, s_rand, s_mix, s_held = (int(s.generate_state(1)[0]) for s in ss)
    expert = collect_policy(env, pi, cfg.expert_pool, s_exp)
    random = collect_random(env, cfg.total, s_rand)
    mixed = mix_datasets(expert, random, cfg.expert_ratio, cfg.total, s_mix)
    held = collect_policy(env, pi, cfg.held_out_expert, s_held, name="expert-held-out")
    return env, mixed, held


def run_corrupted(seed, cfg: CorruptedConfig = CorruptedConfig(), methods=("idrl", "idrl_m1", "action", "bc")):
    """Mean evaluation return of each method on one seed's corrupted mixture."""
    env, mixed, held = corrupted_data(seed, cfg)
    train = normalize_rewards(mixed, "shift", cfg.reward_shift) if cfg.reward_shift else mixed
    eval_seed = seed + 20_000
    out = {}

    def score(policy):
        ev = evaluate_policy(env, policy, cfg.episodes, eval_seed, cfg.deterministic_eval)
        return ev.discounted_mean

    variants = {"idrl": dict(ratio_mode="corrected"), "idrl_m1": dict(ratio_mode="corrected", M=1),
                "action": dict(ratio_mode="action")}
    for name in methods:
        if name in variants:
            icfg = replace(cfg.idrl, seed=seed, **variants[name])
            res = run_idrl(train, icfg, env=env, disc=env)
            out[name] = score(res.policy)
            out[name + "_sizes"] = [r.n_transitions for r in res.reports]
            out[name + "_mean_reward"] = [r.mean_reward for r in res.reports]
        elif name == "bc":
            out[name] = score(behavior_cloning(mixed, cfg.idrl.bc, np.random.default_rng(seed)))
        elif name == "dwbc":
            pol, info = optimal_dwbc(mixed, held, cfg.dwbc_delta, cfg.idrl.bc, DiscriminatorConfig(),
                                     seed=seed)
            out[name] = score(pol)
        else:
            raise ValueError(f"unknown method {name!r}")
    return out
