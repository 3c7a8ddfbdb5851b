"""Semi-gradient dual value learning and action-ratio extraction.

V minimizes the blended objective ``c_v V(s) + c_conj f_p*((Qbar - V)/scale)``
against a target copy Qbar of Q, and Q regresses onto
``r + gamma (1 - done) V(s')`` with V held fixed. At the joint fixed point
``max(0, (f')^-1((Q - V)/scale))`` is the ratio pi*(a|s)/mu(a|s) between the
regularized optimal policy and the behavior policy, not a visitation ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from idrl.batching import Batch, DivergenceError, Sampler
from idrl.data import TransitionDataset
from idrl.divergence import DivergenceSpec
from idrl.nn import (Adam, BackendConfig, TargetCopy, scheduled_lr, state_action_head, state_head,
                     unflatten)


@dataclass
class DualConfig:
    steps: int = 20_000
    batch_size: int | None = 256
    lr: float = 1e-4
    beta1: float = 0.9
    lr_schedule: str = "constant"
    tau: float = 5e-3
    v_bound: float = 1e6
    log_every: int = 1000
    orthogonal: bool = False
    eta: float = 1.0


@dataclass
class DualTrainState:
    V: object
    Q: object
    Q_target: TargetCopy
    opt_v: Adam
    opt_q: Adam
    spec: DivergenceSpec
    step: int = 0
    curve: list = field(default_factory=list)


def init_dual_state(spec, backend: BackendConfig, obs_dim, act_dim, rng, disc=None,
                    norm=None, lr=1e-4, tau=5e-3):
    """Fresh V, Q and target-Q heads. ``norm`` is ``(shift, scale)`` over ``[s, a]``."""
    sh, sc = norm if norm is not None else (None, None)
    V = state_head(backend, obs_dim, rng, disc,
                   None if sh is None else sh[:obs_dim], None if sc is None else sc[:obs_dim])
    Q = state_action_head(backend, obs_dim, act_dim, rng, disc, sh, sc)
    return DualTrainState(V, Q, TargetCopy(Q, tau), Adam(V.params, lr), Adam(Q.params, lr), spec)


def _v_terms(batch: Batch, v, qbar, spec: DivergenceSpec):
    y = (qbar - v) / spec.scale
    c_v, c_conj = spec.weights
    per = c_v * v + c_conj * spec.gen.f_p_star(y)
    # d/dv of per-sample term; the conjugate derivative is the right derivative at the kink
    dv = c_v - (c_conj / spec.scale) * spec.gen.f_p_star_prime(y)
    return batch.mean(per, "v_loss"), batch.p * dv


def v_loss(batch: Batch, state: DualTrainState):
    return _v_terms(batch, state.V(batch.s), state.Q_target(batch.sa), state.spec)[0]


def v_loss_grad(batch: Batch, state: DualTrainState):
    v, cache = state.V.forward(batch.s)
    loss, dv = _v_terms(batch, v, state.Q_target(batch.sa), state.spec)
    return loss, state.V.backward(cache, dv)


def _q_terms(batch: Batch, q, v_next):
    target = batch.r + batch.gamma * batch.not_done * v_next
    err = target - q
    return batch.mean(err * err, "q_loss"), batch.p * (-2.0 * err)


def q_loss(batch: Batch, state: DualTrainState):
    return _q_terms(batch, state.Q(batch.sa), state.V(batch.s2))[0]


def q_loss_grad(batch: Batch, state: DualTrainState):
    q, cache = state.Q.forward(batch.sa)
    loss, dq = _q_terms(batch, q, state.V(batch.s2))
    return loss, state.Q.backward(cache, dq)


def orthogonal_v_grad(batch: Batch, state: DualTrainState, eta):
    """V gradient of the residual-form objective with the bootstrap gradient
    projected orthogonally to the forward gradient and scaled by ``eta``.

    Samples whose forward gradient has zero norm keep only the semi-gradient.
    """
    spec = state.spec
    Gs = state.V.per_sample_grads(batch.s)
    Gn = state.V.per_sample_grads(batch.s2)
    v, v2 = state.V(batch.s), state.V(batch.s2)
    disc = batch.gamma * batch.not_done
    y = (batch.r + disc * v2 - v) / spec.scale
    c_v, c_conj = spec.weights
    k = (c_conj / spec.scale) * spec.gen.f_p_star_prime(y)
    norm2 = np.einsum("ij,ij->i", Gs, Gs)
    dot = np.einsum("ij,ij->i", Gs, Gn)
    ok = norm2 > 0
    coef = np.where(ok, dot / np.where(ok, norm2, 1.0), 0.0)
    G_perp = np.where(ok[:, None], Gn - coef[:, None] * Gs, 0.0)
    per = (c_v - k)[:, None] * Gs + (k * disc * eta)[:, None] * G_perp
    return unflatten(batch.p @ per, state.V.params)


def action_ratio(state: DualTrainState, S, A):
    """``max(0, (f')^-1((Q(s,a) - V(s))/scale))`` with the live Q head."""
    S = np.asarray(S, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    q = state.Q(np.hstack([S.reshape(len(S), -1), A.reshape(len(A), -1)]))
    return np.asarray(state.spec.ratio(q - state.V(S)))


def train_dual(ds: TransitionDataset, state: DualTrainState, cfg: DualConfig, rng,
               sample_weight=None):
    """Run ``cfg.steps`` ticks of (Q step, V step, target update) on ``ds``."""
    sampler = Sampler(ds, cfg.batch_size, rng, sample_weight)
    state.Q_target.tau = cfg.tau
    for opt in (state.opt_q, state.opt_v):
        opt.beta1 = cfg.beta1
    for i in range(cfg.steps):
        state.opt_q.lr = state.opt_v.lr = scheduled_lr(cfg.lr, i, cfg.steps, cfg.lr_schedule)
        batch = sampler()
        lq, gq = q_loss_grad(batch, state)
        state.opt_q.step(state.Q.params, gq)
        if cfg.orthogonal:
            lv = v_loss(batch, state)
            gv = orthogonal_v_grad(batch, state, cfg.eta)
        else:
            lv, gv = v_loss_grad(batch, state)
        state.opt_v.step(state.V.params, gv)
        state.Q_target.soft_update(state.Q)
        state.step += 1
        v_now = state.V(batch.s)
        if not np.all(np.isfinite(v_now)) or np.mean(np.abs(v_now)) > cfg.v_bound:
            raise DivergenceError(
                f"dual training diverged at step {state.step}: mean |V| = {np.mean(np.abs(v_now)):.3g}")
        if cfg.log_every and ((i + 1) % cfg.log_every == 0 or i == cfg.steps - 1):
            ratio = action_ratio(state, batch.s, batch.a)
            state.curve.append({"step": state.step, "v_loss": lv, "q_loss": lq,
                                "mean_ratio": float(batch.p @ ratio)})
    return state
