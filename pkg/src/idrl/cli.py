"""``idrl`` command line: dataset generation, training, filtering, evaluation,
oracle checks and seed-aggregated reports.

Configs are single-record JSON files. Flags given on the command line
override fields read from ``--config``; the effective config is written next
to every run so the run can be repeated from it alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from idrl.correction import CorrectionConfig
from idrl.data import (GridworldSpec, collect_policy, collect_random, load_dataset, make_gridworld,
                       mix_datasets, normalize_rewards, save_dataset, shortest_path_length)
from idrl.divergence import DivergenceSpec
from idrl.driver import (BCConfig, DiscriminatorConfig, GaussianPolicy, IDRLConfig, IterationReport,
                         behavior_cloning, evaluate_policy, filter_dataset, optimal_dwbc, run_idrl,
                         top_x_bc)
from idrl.dual import DualConfig
from idrl.experiments import success_rate
from idrl.nn import BackendConfig
from idrl.oracle import (MICRO_MDPS, check_monotonicity, dump_solution_csv, exact_regularized_solution,
                         exact_visitation, semi_gradient_fixed_point, value_iteration)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    backend: str = "network"
    hidden: tuple = (64, 64)
    activation: str = "relu"
    M: int = 2
    N1: int = 20_000
    N2: int = 20_000
    lam: float = 0.6
    alpha: float = 1.0
    mode: str = "lambda"
    batch_size: int | None = 256
    lr: float = 1e-4
    beta1: float = 0.9
    lr_schedule: str = "constant"
    tau: float = 5e-3
    threshold: float = 0.0
    bc_steps: int = 10_000
    bc_batch_size: int | None = 256
    bc_lr: float = 1e-3
    eval_episodes: int = 100
    eval_deterministic: bool = True
    dataset: str | None = None
    n_transitions: int = 500
    expert_dataset: str | None = None
    env: dict = field(default_factory=lambda: asdict(GridworldSpec()))
    reward_norm: str = "shift"
    reward_shift: float = 3.0
    ratio_mode: str = "corrected"
    reinit: bool = True
    baseline: str = "idrl"
    dwbc_delta: float = 1.0
    top_x: float = 10.0
    output_dir: str = "runs"
    log_every: int = 1000

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        checks = [
            ("backend", self.backend in ("tabular", "network"), "must be 'tabular' or 'network'"),
            ("M", self.M >= 1, "must be >= 1"),
            ("N1", self.N1 >= 0, "must be >= 0"),
            ("N2", self.N2 >= 0, "must be >= 0"),
            ("lam", 0 < self.lam < 1, "must lie in (0, 1)"),
            ("alpha", self.alpha > 0, "must be > 0"),
            ("mode", self.mode in ("lambda", "alpha"), "must be 'lambda' or 'alpha'"),
            ("batch_size", self.batch_size is None or self.batch_size >= 1, "must be >= 1 or null"),
            ("bc_batch_size", self.bc_batch_size is None or self.bc_batch_size >= 1,
             "must be >= 1 or null"),
            ("lr", self.lr > 0, "must be > 0"),
            ("bc_lr", self.bc_lr > 0, "must be > 0"),
            ("beta1", 0 <= self.beta1 < 1, "must lie in [0, 1)"),
            ("lr_schedule", self.lr_schedule in ("constant", "linear"), "must be 'constant' or 'linear'"),
            ("tau", 0 < self.tau <= 1, "must lie in (0, 1]"),
            ("threshold", self.threshold >= 0, "must be >= 0"),
            ("bc_steps", self.bc_steps >= 1, "must be >= 1"),
            ("eval_episodes", self.eval_episodes >= 1, "must be >= 1"),
            ("n_transitions", self.n_transitions >= 1, "must be >= 1"),
            ("reward_norm", self.reward_norm in ("none", "shift", "range"),
             "must be 'none', 'shift' or 'range'"),
            ("ratio_mode", self.ratio_mode in ("corrected", "action"), "must be 'corrected' or 'action'"),
            ("baseline", self.baseline in ("idrl", "bc", "dwbc", "topx"),
             "must be one of idrl, bc, dwbc, topx"),
            ("dwbc_delta", self.dwbc_delta >= 0, "must be >= 0"),
            ("top_x", 0 < self.top_x <= 100, "must lie in (0, 100]"),
        ]
        bad = [f"{name}: {msg}" for name, ok, msg in checks if not ok]
        if self.baseline == "dwbc" and self.expert_dataset is None:
            bad.append("expert_dataset: required by the dwbc baseline")
        for name in ("dataset", "expert_dataset"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                bad.append(f"{name}: file {path!r} does not exist")
        try:
            self.env = asdict(GridworldSpec(**self.env))
        except (TypeError, ValueError) as exc:
            bad.append(f"env: {exc}")
        if bad:
            raise ConfigError("invalid config: " + "; ".join(bad))

    # -- conversions -----------------------------------------------------

    @property
    def gridworld(self):
        return GridworldSpec(**self.env)

    def divergence(self):
        if self.mode == "alpha":
            return DivergenceSpec(alpha=self.alpha, mode="alpha")
        return DivergenceSpec(lam=self.lam)

    def idrl_config(self) -> IDRLConfig:
        common = dict(batch_size=self.batch_size, lr=self.lr, beta1=self.beta1,
                      lr_schedule=self.lr_schedule, log_every=self.log_every)
        return IDRLConfig(
            M=self.M, spec=self.divergence(),
            dual=DualConfig(steps=self.N1, tau=self.tau, **common),
            correction=CorrectionConfig(steps=self.N2, **common),
            bc=self.bc_config(),
            backend=BackendConfig(self.backend, self.hidden, self.activation),
            ratio_mode=self.ratio_mode, reinit=self.reinit, threshold=self.threshold, seed=self.seed)

    def bc_config(self) -> BCConfig:
        return BCConfig(steps=self.bc_steps, batch_size=self.bc_batch_size, lr=self.bc_lr,
                        hidden=self.hidden, activation=self.activation)

    def to_record(self):
        rec = asdict(self)
        rec["hidden"] = list(self.hidden)
        rec["env"] = json.loads(json.dumps(self.env))
        return rec


PRESETS = {
    "desk": {},
    "full": {"N1": 500_000, "N2": 500_000, "hidden": (256, 256, 256)},
    "toycase": {"backend": "tabular", "N1": 5000, "N2": 5000, "batch_size": None, "lr": 0.1,
                "beta1": 0.0, "lr_schedule": "linear", "tau": 0.05, "bc_steps": 5000,
                "log_every": 500},
}
PRESET_SEEDS = {"desk": 3, "full": 7, "toycase": 3}


def load_config(path=None, overrides=None, preset=None):
    rec = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}")
        rec.update(PRESETS[preset])
    if path is not None:
        text = Path(path).read_text().strip()
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) != 1:
            raise ConfigError(f"{path}: a config file holds exactly one record line")
        try:
            rec.update(json.loads(lines[0]))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed config record: {exc}") from None
    rec.update(overrides or {})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(rec) - known)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    try:
        return ExperimentConfig(**rec)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def save_config(cfg: ExperimentConfig, path):
    Path(path).write_text(json.dumps(cfg.to_record(), sort_keys=True, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# CSV writers


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def write_iterations(path, reports):
    _write_csv(path, IterationReport.CSV_FIELDS, [r.row() for r in reports])


def write_curves(path, curves):
    _write_csv(path, ("iteration", "phase", "step", "metric", "value"),
               [(k, ph, st, m, repr(float(v))) for k, ph, st, m, v in curves])


def write_ratios(path, est):
    _write_csv(path, ("index", "w_a_given_s", "w_s", "w_sa"),
               [(i, repr(float(a)), repr(float(s)), repr(float(c)))
                for i, (a, s, c) in enumerate(zip(est.action, est.state, est.combined))])


EVAL_FIELDS = ("seed", "method", "mean", "std", "discounted_mean", "discounted_std", "success_rate")


# ---------------------------------------------------------------------------
# Training


def train_one(cfg: ExperimentConfig):
    """Run one seed end to end; returns the run directory."""
    out = Path(cfg.output_dir) / f"seed_{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    env, _ = make_gridworld(cfg.gridworld)
    data = load_dataset(cfg.dataset) if cfg.dataset else collect_random(env, cfg.n_transitions, cfg.seed)
    train = normalize_rewards(data, cfg.reward_norm, cfg.reward_shift)
    bc_rng = np.random.default_rng(cfg.seed)
    if cfg.baseline == "idrl":
        res = run_idrl(train, cfg.idrl_config(), env=env, disc=env)
        policy = res.policy
        write_iterations(out / "iterations.csv", res.reports)
        write_curves(out / "curves.csv", res.curves)
        for k, est in enumerate(res.ratios, 1):
            write_ratios(out / f"ratios_iter{k}.csv", est)
        method = "idrl" if cfg.ratio_mode == "corrected" else "idrl_action"
    elif cfg.baseline == "bc":
        policy, method = behavior_cloning(data, cfg.bc_config(), bc_rng), "bc"
    elif cfg.baseline == "topx":
        policy, method = top_x_bc(data, cfg.top_x, cfg.bc_config(), cfg.seed), f"top{cfg.top_x:g}bc"
    else:
        policy, info = optimal_dwbc(data, load_dataset(cfg.expert_dataset), cfg.dwbc_delta,
                                    cfg.bc_config(), DiscriminatorConfig(), seed=cfg.seed)
        method = "dwbc"
    policy.save(out / "policy.ckpt")
    ev = evaluate_policy(env, policy, cfg.eval_episodes, cfg.seed + 10_000, cfg.eval_deterministic)
    limit = shortest_path_length(cfg.gridworld) + 2
    _write_csv(out / "eval.csv", EVAL_FIELDS,
               [(cfg.seed, method, repr(ev.mean), repr(ev.std), repr(ev.discounted_mean),
                 repr(ev.discounted_std), repr(success_rate(ev, limit)))])
    save_config(cfg, out / "config.json")
    return str(out)


def cmd_train(args):
    cfg = load_config(args.config, _overrides(args), args.preset)
    k = args.seeds if args.seeds is not None else PRESET_SEEDS.get(args.preset, 1)
    workers = args.workers or k
    cfgs = [replace(cfg, seed=cfg.seed + i) for i in range(k)]
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    save_config(cfg, Path(cfg.output_dir) / "config.json")
    if k == 1 or workers == 1:
        dirs = [train_one(c) for c in cfgs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            dirs = list(pool.map(train_one, cfgs))
    for d in dirs:
        print(d)
    return 0


# ---------------------------------------------------------------------------
# Other subcommands


def cmd_gen(args):
    spec = load_config(args.config).gridworld if args.config else GridworldSpec()
    env, mdp = make_gridworld(spec)
    if args.policy == "random":
        ds = collect_random(env, args.n, args.seed)
    else:
        ds = collect_policy(env, value_iteration(mdp)[2], args.n, args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} transitions to {args.out}")
    return 0


def cmd_mix(args):
    mixed = mix_datasets(load_dataset(args.expert), load_dataset(args.random), args.ratio, args.total,
                         args.seed)
    save_dataset(mixed, args.out)
    print(f"wrote {len(mixed)} transitions to {args.out}")
    return 0


def read_ratio_column(path, column):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or column not in rows[0]:
        raise ValueError(f"{path}: no column {column!r}")
    idx = np.array([int(r["index"]) for r in rows])
    if not np.array_equal(idx, np.arange(len(rows))):
        raise ValueError(f"{path}: ratio indices must be 0..n-1 in order")
    return np.array([float(r[column]) for r in rows])


def cmd_filter(args):
    ds = load_dataset(args.data)
    out = filter_dataset(ds, read_ratio_column(args.ratios, args.column), args.threshold)
    save_dataset(out, args.out)
    print(f"kept {len(out)} of {len(ds)} transitions")
    return 0


def cmd_eval(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    env, _ = make_gridworld(cfg.gridworld)
    ev = evaluate_policy(env, GaussianPolicy.load(args.policy), args.episodes, args.seed,
                         not args.stochastic)
    limit = shortest_path_length(cfg.gridworld) + 2
    row = (args.seed, "eval", repr(ev.mean), repr(ev.std), repr(ev.discounted_mean),
           repr(ev.discounted_std), repr(success_rate(ev, limit)))
    if args.out:
        _write_csv(args.out, EVAL_FIELDS, [row])
    wr = csv.writer(sys.stdout, lineterminator="\n")
    wr.writerow(EVAL_FIELDS)
    wr.writerow(row)
    return 0


def cmd_oracle(args):
    mdp = MICRO_MDPS[args.mdp]()
    uniform = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    dD = exact_visitation(mdp, uniform)
    if args.check == "monotonicity":
        vals = check_monotonicity(mdp, dD, args.alpha, args.iterations)
        for k, v in enumerate(vals, 1):
            print(f"{k},{v!r}")
        ok = all(b >= a - 1e-8 for a, b in zip(vals, vals[1:]))
        print("non-decreasing" if ok else "DECREASING")
        return 0 if ok else 1
    if args.check == "solve":
        sol = exact_regularized_solution(mdp, dD, args.alpha)
        if args.out:
            dump_solution_csv(sol, args.out)
        print(f"objective,{sol.objective!r}")
        print(f"expected_reward,{sol.expected_reward!r}")
        return 0
    V, _, w = semi_gradient_fixed_point(mdp, uniform, alpha=args.alpha)
    for s in range(mdp.n_states):
        print(f"{s},{V[s]!r}," + ",".join(repr(float(x)) for x in w[s]))
    return 0


def cmd_report(args):
    runs = Path(args.runs)
    files = sorted(runs.glob("seed_*/eval.csv"))
    if not files:
        raise FileNotFoundError(f"no seed_*/eval.csv under {runs}")
    by_method = {}
    for fpath in files:
        with open(fpath, newline="") as fh:
            for row in csv.DictReader(fh):
                by_method.setdefault(row["method"], []).append(row)
    metrics = ("mean", "discounted_mean", "success_rate")
    out_rows = []
    for method in sorted(by_method):
        rows = by_method[method]
        rec = [method, len(rows)]
        for m in metrics:
            vals = np.array([float(r[m]) for r in rows])
            rec += [repr(float(vals.mean())), repr(float(vals.std()))]
        out_rows.append(rec)
    header = ["method", "n_seeds"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")]
    out = Path(args.out) if args.out else runs / "summary.csv"
    _write_csv(out, header, out_rows)
    for rec in out_rows:
        print(f"{rec[0]}: return {float(rec[2]):.4f} ± {float(rec[3]):.4f} over {rec[1]} seeds")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing

OVERRIDABLE = {
    "seed": int, "backend": str, "M": int, "N1": int, "N2": int, "lam": float, "alpha": float,
    "mode": str, "lr": float, "tau": float, "threshold": float, "bc_steps": int,
    "eval_episodes": int, "dataset": str, "expert_dataset": str, "ratio_mode": str,
    "baseline": str, "output_dir": str, "n_transitions": int, "dwbc_delta": float, "top_x": float,
    "reward_norm": str, "reward_shift": float,
}


def _overrides(args):
    out = {k: getattr(args, k) for k in OVERRIDABLE if getattr(args, k, None) is not None}
    if getattr(args, "batch_size", None) is not None:
        out["batch_size"] = None if args.batch_size <= 0 else args.batch_size
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="idrl", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a gridworld dataset")
    g.add_argument("--env", choices=["gridworld"], default="gridworld")
    g.add_argument("--policy", choices=["random", "expert"], default="random")
    g.add_argument("--n", type=int, default=500, help="number of transitions")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="config file whose env spec is used")
    g.add_argument("--out", default="data.jsonl")
    g.set_defaults(func=cmd_gen)

    m = sub.add_parser("mix", help="mix expert and random datasets")
    m.add_argument("--expert", required=True)
    m.add_argument("--random", required=True)
    m.add_argument("--ratio", type=float, default=0.05, help="expert fraction of the output")
    m.add_argument("--total", type=int, default=10_000)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", default="mixed.jsonl")
    m.set_defaults(func=cmd_mix)

    t = sub.add_parser("train", help="run the iterative loop or a baseline")
    t.add_argument("--config", help="single-record JSON config file")
    t.add_argument("--preset", choices=sorted(PRESETS), help="named defaults applied before --config")
    t.add_argument("--seeds", type=int, help="run this many consecutive seeds in parallel")
    t.add_argument("--workers", type=int, default=None, help="process pool size (default: one per seed)")
    for name, typ in OVERRIDABLE.items():
        t.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, help=f"override {name}")
    t.add_argument("--batch-size", dest="batch_size", type=int, help="override batch_size; 0 = full batch")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("filter", help="keep transitions whose ratio is above a threshold")
    f.add_argument("--data", required=True)
    f.add_argument("--ratios", required=True, help="ratio dump CSV from train")
    f.add_argument("--column", default="w_sa", choices=["w_sa", "w_a_given_s", "w_s"])
    f.add_argument("--threshold", type=float, default=0.0)
    f.add_argument("--out", default="filtered.jsonl")
    f.set_defaults(func=cmd_filter)

    e = sub.add_parser("eval", help="evaluate a saved policy")
    e.add_argument("--policy", required=True)
    e.add_argument("--config", help="config whose env spec is used")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--stochastic", action="store_true", help="sample actions instead of the mean")
    e.add_argument("--out", help="optional CSV path")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle", help="exact tabular checks on named micro-MDPs")
    o.add_argument("--check", choices=["monotonicity", "solve", "fixed-point"], default="monotonicity")
    o.add_argument("--mdp", choices=sorted(MICRO_MDPS), default="chain2")
    o.add_argument("--alpha", type=float, default=0.5)
    o.add_argument("--iterations", type=int, default=4)
    o.add_argument("--out", help="CSV dump for --check solve")
    o.set_defaults(func=cmd_oracle)

    r = sub.add_parser("report", help="mean and std over seeds of a runs directory")
    r.add_argument("--runs", required=True)
    r.add_argument("--out", help="summary CSV path (default RUNS/summary.csv)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
