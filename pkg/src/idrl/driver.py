"""The filter-and-redistill loop, weighted behavior cloning and imitation baselines."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from idrl.batching import Sampler
from idrl.correction import (CorrectionConfig, combined_ratio, init_correction_state, state_ratio,
                             train_correction)
from idrl.data import TransitionDataset
from idrl.divergence import DivergenceSpec
from idrl.dual import DualConfig, action_ratio, init_dual_state, train_dual
from idrl.nn import Adam, BackendConfig, MLPHead, load_checkpoint, save_checkpoint


class EmptyFilterError(ValueError):
    pass


class ZeroWeightsError(ValueError):
    pass


@dataclass
class RatioEstimate:
    """Per-row ratios aligned with the dataset they were computed on."""

    action: np.ndarray  # w(a|s)
    state: np.ndarray  # max(0, W(s))
    combined: np.ndarray  # w(s) * w(a|s)

    def weights(self, mode):
        if mode == "corrected":
            return self.combined
        if mode == "action":
            return self.action
        raise ValueError(f"ratio mode must be 'corrected' or 'action', got {mode!r}")


def filter_dataset(ds: TransitionDataset, ratios, threshold=0.0, iteration=None):
    """Rows whose weight is strictly above ``threshold``, in original order."""
    w = np.asarray(ratios.combined if isinstance(ratios, RatioEstimate) else ratios, dtype=np.float64)
    if w.shape != (len(ds),):
        raise ValueError(f"expected {len(ds)} ratios, got shape {w.shape}")
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    keep = np.nonzero(w > threshold)[0]
    if keep.size == 0:
        where = "" if iteration is None else f" at iteration {iteration}"
        raise EmptyFilterError(f"filter removed every transition{where}; "
                               "lower the threshold or run fewer iterations")
    return ds.subset(keep, provenance=f"{ds.provenance}; filter>{threshold:g}")


def fragment_lengths(ds: TransitionDataset):
    """Lengths of maximal runs of consecutive steps within each trajectory."""
    if len(ds) == 0:
        return np.zeros(0, dtype=int)
    order = np.lexsort((ds.t, ds.traj))
    tr, st = ds.traj[order], ds.t[order]
    breaks = np.ones(len(ds), dtype=bool)
    breaks[1:] = (tr[1:] != tr[:-1]) | (st[1:] != st[:-1] + 1)
    starts = np.nonzero(breaks)[0]
    return np.diff(np.append(starts, len(ds)))


def input_normalizer(ds: TransitionDataset):
    """Shift and scale over ``[s, a]`` columns; constant columns keep scale 1."""
    X = np.hstack([ds.s, ds.a])
    mean, std = X.mean(axis=0), X.std(axis=0)
    return mean, np.where(std > 1e-8, std, 1.0)


# ---------------------------------------------------------------------------
# Policies


class GaussianPolicy:
    """Diagonal Gaussian with an MLP mean and a state-independent log-std."""

    LOG_STD_BOUNDS = (-5.0, 2.0)

    def __init__(self, mean: MLPHead, log_std):
        self.mean_head = mean
        self.log_std = np.clip(np.asarray(log_std, dtype=np.float64), *self.LOG_STD_BOUNDS)

    @classmethod
    def create(cls, obs_dim, act_dim, hidden, activation, rng, in_shift=None, in_scale=None,
               log_std=0.0):
        head = MLPHead(obs_dim, hidden, act_dim, activation, rng, in_shift, in_scale)
        return cls(head, np.full(act_dim, float(log_std)))

    @property
    def params(self):
        return [*self.mean_head.params, self.log_std]

    @property
    def std(self):
        return np.exp(self.log_std)

    def mean(self, S):
        out = self.mean_head(S)
        return out[:, None] if out.ndim == 1 else out

    def log_prob(self, S, A):
        mu = self.mean(S)
        z = (np.asarray(A, dtype=np.float64).reshape(mu.shape) - mu) / self.std
        return -0.5 * (z * z).sum(axis=1) - self.log_std.sum() - 0.5 * mu.shape[1] * np.log(2 * np.pi)

    def nll_grad(self, S, A, p):
        """``-sum_i p_i log pi(a_i|s_i)`` and its gradient over ``params``."""
        mu, cache = self.mean_head.forward(S)
        mu2 = mu[:, None] if mu.ndim == 1 else mu
        A = np.asarray(A, dtype=np.float64).reshape(mu2.shape)
        var = self.std ** 2
        diff = A - mu2
        logp = (-0.5 * (diff * diff / var).sum(axis=1) - self.log_std.sum()
                - 0.5 * mu2.shape[1] * np.log(2 * np.pi))
        loss = -float(p @ logp)
        d_mu = -(p[:, None] * diff / var)
        d_ls = -(p[:, None] * (diff * diff / var - 1.0)).sum(axis=0)
        grads = self.mean_head.backward(cache, d_mu[:, 0] if mu.ndim == 1 else d_mu)
        return loss, [*grads, d_ls]

    def act(self, obs, rng=None, deterministic=True):
        m = self.mean(np.asarray(obs, dtype=np.float64)[None])[0]
        if deterministic:
            return m
        return m + self.std * rng.standard_normal(m.shape)

    def save(self, path):
        save_checkpoint(self.mean_head, path, extra={"log_std": self.log_std.tolist()})

    @classmethod
    def load(cls, path):
        head, extra = load_checkpoint(path)
        return cls(head, extra["log_std"])


@dataclass
class BCConfig:
    steps: int = 10_000
    batch_size: int | None = 256
    lr: float = 1e-3
    hidden: tuple = (64, 64)
    activation: str = "relu"
    log_std_init: float = 0.0


def weighted_bc(ds: TransitionDataset, weights, cfg: BCConfig, rng, norm=None):
    """Maximize ``sum_i w_i log pi(a_i|s_i) / sum_i w_i``.

    Minibatches are drawn in proportion to the weights, so every batch is an
    unbiased sample of the weighted objective.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(ds),):
        raise ValueError(f"expected {len(ds)} weights, got shape {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if not w.sum() > 0:
        raise ZeroWeightsError("all behavior-cloning weights are zero")
    if norm is None:
        norm = input_normalizer(ds)
    sh, sc = norm
    hidden = tuple(cfg.hidden)
    policy = GaussianPolicy.create(ds.obs_dim, ds.act_dim, hidden, cfg.activation, rng,
                                   sh[:ds.obs_dim], sc[:ds.obs_dim], cfg.log_std_init)
    opt = Adam(policy.params, cfg.lr)
    sampler = Sampler(ds, cfg.batch_size, rng, w)
    for _ in range(cfg.steps):
        b = sampler()
        _, grads = policy.nll_grad(b.s, b.a, b.p)
        opt.step(policy.params, grads)
        np.clip(policy.log_std, *GaussianPolicy.LOG_STD_BOUNDS, out=policy.log_std)
    return policy


def behavior_cloning(ds: TransitionDataset, cfg: BCConfig, rng, norm=None):
    return weighted_bc(ds, np.ones(len(ds)), cfg, rng, norm)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalResult:
    mean: float
    std: float
    discounted_mean: float
    discounted_std: float
    returns: np.ndarray
    discounted_returns: np.ndarray
    lengths: np.ndarray
    reached: np.ndarray  # episode ended by termination rather than the step limit


def evaluate_policy(env, policy, episodes, seed, deterministic=True, gamma=None):
    """Roll out ``policy.act(obs, rng, deterministic)`` from the start state."""
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    gamma = env.spec.gamma if gamma is None else gamma
    ss = np.random.SeedSequence(seed)
    rets, drets, lens, reached = [], [], [], []
    for child in ss.spawn(episodes):
        env_seed, act_seed = child.generate_state(2)
        rng = np.random.default_rng(act_seed)
        obs = env.reset(int(env_seed))
        ret = dret = 0.0
        disc = 1.0
        for t in range(10**6):
            obs, r, done, trunc = env.step(policy.act(obs, rng, deterministic))
            ret += r
            dret += disc * r
            disc *= gamma
            if done or trunc:
                break
        rets.append(ret)
        drets.append(dret)
        lens.append(t + 1)
        reached.append(done)
    rets, drets = np.array(rets), np.array(drets)
    return EvalResult(float(rets.mean()), float(rets.std()), float(drets.mean()), float(drets.std()),
                      rets, drets, np.array(lens), np.array(reached))


class TablePolicy:
    """Actor for an ``(S, A)`` policy table on a discretized environment."""

    def __init__(self, env, table, action_vectors):
        self.env, self.table, self.vectors = env, np.asarray(table, float), action_vectors

    def act(self, obs, rng=None, deterministic=True):
        row = self.table[self.env.state_index(np.asarray(obs)[None])[0]]
        a = int(np.argmax(row)) if deterministic else int(rng.choice(len(row), p=row))
        return self.vectors[a]


# ---------------------------------------------------------------------------
# The iterative loop


@dataclass
class IterationReport:
    iteration: int
    n_transitions: int
    mean_reward: float
    mean_fragment_length: float
    eval_return: float
    wall_clock: float = field(default=0.0, compare=False)

    CSV_FIELDS = ("iteration", "n_transitions", "mean_reward", "mean_fragment_length", "eval_return")

    def row(self):
        return [self.iteration, self.n_transitions, repr(self.mean_reward),
                repr(self.mean_fragment_length), repr(self.eval_return)]


@dataclass
class IDRLConfig:
    M: int = 2
    spec: DivergenceSpec = field(default_factory=DivergenceSpec)
    dual: DualConfig = field(default_factory=DualConfig)
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)
    bc: BCConfig = field(default_factory=BCConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    ratio_mode: str = "corrected"
    reinit: bool = True
    threshold: float = 0.0
    seed: int = 0
    eval_each_iteration: bool = False
    eval_episodes: int = 10
    eval_deterministic: bool = True

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.ratio_mode not in ("corrected", "action"):
            raise ValueError(f"ratio mode must be 'corrected' or 'action', got {self.ratio_mode!r}")
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")


@dataclass
class IDRLResult:
    policy: GaussianPolicy
    reports: list
    ratios: list  # RatioEstimate per iteration
    datasets: list  # D_1 .. D_M
    curves: list  # rows of (iteration, phase, step, metric, value)


def estimate_ratios(ds, cfg: IDRLConfig, rng_spawn, disc=None, norm=None, dual_state=None):
    """One dual pass and one correction pass on ``ds``. Returns ``(RatioEstimate, dual, corr)``."""
    r_dual_init, r_dual, r_corr_init, r_corr = (np.random.default_rng(s) for s in rng_spawn)
    if dual_state is None:
        dual_state = init_dual_state(cfg.spec, cfg.backend, ds.obs_dim, ds.act_dim, r_dual_init,
                                     disc, norm, cfg.dual.lr, cfg.dual.tau)
    train_dual(ds, dual_state, cfg.dual, r_dual)
    act = action_ratio(dual_state, ds.s, ds.a)
    corr = init_correction_state(cfg.spec, cfg.backend, ds.obs_dim, act, r_corr_init, disc, norm,
                                 cfg.correction.lr)
    train_correction(ds, corr, cfg.correction, r_corr)
    st = state_ratio(corr, ds.s)
    return RatioEstimate(act, st, combined_ratio(corr, ds.s, act)), dual_state, corr


def _curve_rows(k, phase, curve):
    rows = []
    for rec in curve:
        for key, val in rec.items():
            if key != "step":
                rows.append((k, phase, rec["step"], key, val))
    return rows


def run_idrl(ds: TransitionDataset, cfg: IDRLConfig, env=None, disc=None):
    """``M`` rounds of (dual, correction, filter), then weighted BC on ``D_M`` with ``w_M``.

    ``disc`` is required by the tabular backend; ``env`` enables the optional
    per-iteration diagnostic evaluation.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.M + 1)
    norm = input_normalizer(ds)
    reports, ratios, datasets, curves = [], [], [], []
    dual_state = None
    current = ds
    for k in range(1, cfg.M + 1):
        t0 = time.perf_counter()
        streams = seeds[k - 1].spawn(6)
        est, dual_state, corr = estimate_ratios(
            current, cfg, streams[:4], disc, norm, None if cfg.reinit else dual_state)
        curves += _curve_rows(k, "dual", dual_state.curve)
        curves += _curve_rows(k, "correction", corr.curve)
        if cfg.reinit:
            dual_state = None
        else:
            dual_state.curve = []
        w = est.weights(cfg.ratio_mode)
        eval_return = float("nan")
        if cfg.eval_each_iteration and env is not None:
            pol = weighted_bc(current, w, cfg.bc, np.random.default_rng(streams[4]), norm)
            eval_return = evaluate_policy(env, pol, cfg.eval_episodes, streams[5],
                                          cfg.eval_deterministic).mean
        frags = fragment_lengths(current)
        datasets.append(current)
        ratios.append(est)
        reports.append(IterationReport(k, len(current), float(current.r.mean()), float(frags.mean()),
                                       eval_return, time.perf_counter() - t0))
        if k < cfg.M:
            current = filter_dataset(current, w, cfg.threshold, iteration=k)
    policy = weighted_bc(current, ratios[-1].weights(cfg.ratio_mode), cfg.bc,
                         np.random.default_rng(seeds[cfg.M]), norm)
    return IDRLResult(policy, reports, ratios, datasets, curves)


# ---------------------------------------------------------------------------
# Imitation baselines


class DiscriminatorHead:
    """Binary classifier over ``(s, a)`` with outputs kept inside ``(0, 1)``."""

    EPS = 1e-12

    def __init__(self, net: MLPHead):
        self.net = net

    @staticmethod
    def _sigmoid(z):
        return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def __call__(self, SA):
        return np.clip(self._sigmoid(self.net(SA)), self.EPS, 1.0 - self.EPS)

    def density_ratio(self, SA):
        d = self(SA)
        return d / (1.0 - d)


@dataclass
class DiscriminatorConfig:
    steps: int = 5000
    batch_size: int = 256
    lr: float = 1e-3
    hidden: tuple = (64, 64)
    activation: str = "relu"


def train_discriminator(offline: TransitionDataset, expert: TransitionDataset, cfg: DiscriminatorConfig,
                        rng, norm=None):
    """Balanced cross-entropy with expert pairs labelled 1 and offline pairs 0."""
    if len(offline) == 0 or len(expert) == 0:
        raise ValueError("both datasets must be non-empty")
    X_e = np.hstack([expert.s, expert.a])
    X_o = np.hstack([offline.s, offline.a])
    if norm is None:
        X = np.vstack([X_o, X_e])
        std = X.std(axis=0)
        norm = (X.mean(axis=0), np.where(std > 1e-8, std, 1.0))
    net = MLPHead(offline.obs_dim + offline.act_dim, tuple(cfg.hidden), 1, cfg.activation, rng, *norm)
    disc = DiscriminatorHead(net)
    opt = Adam(net.params, cfg.lr)
    for _ in range(cfg.steps):
        ie = rng.integers(0, len(X_e), cfg.batch_size)
        io = rng.integers(0, len(X_o), cfg.batch_size)
        X = np.vstack([X_e[ie], X_o[io]])
        y = np.concatenate([np.ones(cfg.batch_size), np.zeros(cfg.batch_size)])
        z, cache = net.forward(X)
        dz = (DiscriminatorHead._sigmoid(z) - y) / len(y)
        opt.step(net.params, net.backward(cache, dz))
    return disc


def dwbc_weights(d, delta):
    """``d / (1 - d)`` with entries at or below ``delta`` set to zero."""
    d = np.asarray(d, dtype=np.float64)
    w = d / (1.0 - d)
    return np.where(w > delta, w, 0.0)


def optimal_dwbc(offline: TransitionDataset, expert: TransitionDataset, delta, bc_cfg: BCConfig,
                 disc_cfg: DiscriminatorConfig | None = None, seed=0):
    """Discriminator-weighted BC on the offline data. Returns ``(policy, info)``."""
    s_disc, s_bc = np.random.SeedSequence(seed).spawn(2)
    disc = train_discriminator(offline, expert, disc_cfg or DiscriminatorConfig(),
                               np.random.default_rng(s_disc))
    d = disc(np.hstack([offline.s, offline.a]))
    info = {"saturated": bool(np.all((d < 1e-6) | (d > 1.0 - 1e-6)))}
    if info["saturated"]:
        warnings.warn("discriminator outputs are saturated at 0/1", RuntimeWarning, stacklevel=2)
    w = dwbc_weights(d, delta)
    info["kept"] = int(np.count_nonzero(w))
    policy = weighted_bc(offline, w, bc_cfg, np.random.default_rng(s_bc))
    return policy, info


def top_trajectories(ds: TransitionDataset, x):
    """Row indices of the top ``x`` percent of complete trajectories by return.

    A trajectory is complete when it holds the contiguous steps ``0..L-1``.
    Ties are broken by the smaller trajectory id.
    """
    if not 0 < x <= 100:
        raise ValueError("x must lie in (0, 100]")
    returns = ds.trajectory_returns()
    complete = []
    for tid in returns:
        steps = np.sort(ds.t[ds.traj == tid])
        if np.array_equal(steps, np.arange(len(steps))):
            complete.append(tid)
    if not complete:
        raise ValueError("dataset has no complete trajectory")
    ranked = sorted(complete, key=lambda tid: (-returns[tid], tid))
    keep = ranked[:max(1, int(np.floor(x / 100.0 * len(ranked) + 1e-9)))]
    return np.nonzero(np.isin(ds.traj, keep))[0]


def top_x_bc(ds: TransitionDataset, x, cfg: BCConfig, seed=0):
    rows = top_trajectories(ds, x)
    sub = ds.subset(rows)
    return behavior_cloning(sub, cfg, np.random.default_rng(seed))


