"""Recovery of the state visitation ratio from a frozen action ratio.

The pair of objectives below is a sample-based saddle point whose solution
gives ``W(s) = (f')^-1(E_mu[w(a|s) (TU - U)(s, a)])`` with the reward-free
backup ``TU(s, a) = gamma (1 - done) U(s')``::

    W: min  E[f(W(s)) - w(a|s) (TU - U) W(s)]                 (U held fixed)
    U: min  E[U(s) - TU] + E[max(0, W(s)) w(a|s) (TU - U)]    (W held fixed)

The first U term stands in for the initial-state term of the dual problem,
so no separate initial-state sample is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from idrl.batching import Batch, DivergenceError, Sampler
from idrl.data import TransitionDataset
from idrl.divergence import DivergenceSpec
from idrl.nn import Adam, BackendConfig, scheduled_lr, state_head


@dataclass
class CorrectionConfig:
    steps: int = 20_000
    batch_size: int | None = 256
    lr: float = 1e-4
    beta1: float = 0.9
    lr_schedule: str = "constant"
    bound: float = 1e6
    log_every: int = 1000


@dataclass
class CorrectionState:
    U: object
    W: object
    opt_u: Adam
    opt_w: Adam
    spec: DivergenceSpec
    action_ratios: np.ndarray  # frozen w(a|s), one per dataset row
    step: int = 0
    curve: list = field(default_factory=list)


def init_correction_state(spec, backend: BackendConfig, obs_dim, action_ratios, rng, disc=None,
                          norm=None, lr=1e-4):
    sh, sc = norm if norm is not None else (None, None)
    sh = None if sh is None else sh[:obs_dim]
    sc = None if sc is None else sc[:obs_dim]
    U = state_head(backend, obs_dim, rng, disc, sh, sc)
    W = state_head(backend, obs_dim, rng, disc, sh, sc)
    ratios = np.array(action_ratios, dtype=np.float64)
    ratios.setflags(write=False)
    return CorrectionState(U, W, Adam(U.params, lr), Adam(W.params, lr), spec, ratios)


def _ratios(batch: Batch, state: CorrectionState):
    return state.action_ratios[batch.idx]


def _w_terms(batch: Batch, w_val, u, u_next, ratio, gen):
    g = ratio * (batch.gamma * batch.not_done * u_next - u)
    per = gen.f(w_val) - g * w_val
    return batch.mean(per, "w_loss"), batch.p * (gen.f_prime(w_val) - g)


def w_loss(batch: Batch, state: CorrectionState):
    return _w_terms(batch, state.W(batch.s), state.U(batch.s), state.U(batch.s2),
                    _ratios(batch, state), state.spec.gen)[0]


def w_loss_grad(batch: Batch, state: CorrectionState):
    w_val, cache = state.W.forward(batch.s)
    loss, dw = _w_terms(batch, w_val, state.U(batch.s), state.U(batch.s2),
                        _ratios(batch, state), state.spec.gen)
    return loss, state.W.backward(cache, dw)


def _u_terms(batch: Batch, u, u_next, w_clip, ratio):
    disc = batch.gamma * batch.not_done
    resid = disc * u_next - u  # TU - U
    per = -resid + w_clip * ratio * resid
    c = 1.0 - w_clip * ratio  # coefficient on U(s); U(s') gets -disc * c
    return batch.mean(per, "u_loss"), batch.p * c, batch.p * (-disc * c)


def u_loss(batch: Batch, state: CorrectionState):
    w_clip = np.maximum(0.0, state.W(batch.s))
    return _u_terms(batch, state.U(batch.s), state.U(batch.s2), w_clip, _ratios(batch, state))[0]


def u_loss_grad(batch: Batch, state: CorrectionState):
    u, cache_s = state.U.forward(batch.s)
    u_next, cache_n = state.U.forward(batch.s2)
    w_clip = np.maximum(0.0, state.W(batch.s))
    loss, du, du_next = _u_terms(batch, u, u_next, w_clip, _ratios(batch, state))
    g1 = state.U.backward(cache_s, du)
    g2 = state.U.backward(cache_n, du_next)
    return loss, [a + b for a, b in zip(g1, g2)]


def state_ratio(state: CorrectionState, S):
    return np.maximum(0.0, state.W(np.asarray(S, dtype=np.float64)))


def combined_ratio(state: CorrectionState, S, action_ratios):
    """``max(0, W(s)) * w(a|s)`` for rows with known action ratios."""
    return state_ratio(state, S) * np.asarray(action_ratios, dtype=np.float64)


def train_correction(ds: TransitionDataset, state: CorrectionState, cfg: CorrectionConfig, rng,
                     sample_weight=None):
    """Alternate one W step and one U step for ``cfg.steps`` ticks."""
    if len(state.action_ratios) != len(ds):
        raise ValueError("action ratios must align with dataset rows")
    sampler = Sampler(ds, cfg.batch_size, rng, sample_weight)
    for opt in (state.opt_u, state.opt_w):
        opt.beta1 = cfg.beta1
    for i in range(cfg.steps):
        state.opt_u.lr = state.opt_w.lr = scheduled_lr(cfg.lr, i, cfg.steps, cfg.lr_schedule)
        batch = sampler()
        lw, gw = w_loss_grad(batch, state)
        state.opt_w.step(state.W.params, gw)
        lu, gu = u_loss_grad(batch, state)
        state.opt_u.step(state.U.params, gu)
        state.step += 1
        w_now = state.W(batch.s)
        u_now = state.U(batch.s)
        scale = max(np.mean(np.abs(w_now)), np.mean(np.abs(u_now)))
        if not (np.isfinite(scale) and scale <= cfg.bound):
            raise DivergenceError(f"correction diverged at step {state.step}: scale {scale:.3g}")
        if cfg.log_every and ((i + 1) % cfg.log_every == 0 or i == cfg.steps - 1):
            state.curve.append({"step": state.step, "w_loss": lw, "u_loss": lu,
                                "mean_state_ratio": float(batch.p @ np.maximum(0.0, w_now))})
    return state
