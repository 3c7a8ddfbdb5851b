"""Shared fixtures for learning-rule tests."""

import numpy as np

from idrl.batching import make_batch
from idrl.data import IndexDiscretizer, collect_random, expected_tabular_dataset, make_gridworld
from idrl.dual import DualConfig, init_dual_state, train_dual
from idrl.nn import BackendConfig, get_flat, set_flat

NET = BackendConfig("network", hidden=(8, 8), activation="tanh")
TAB = BackendConfig("tabular")


def numeric_grad(fn, head, eps=1e-6):
    flat = get_flat(head)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        set_flat(head, flat)
        up = fn()
        flat[i] = orig - eps
        set_flat(head, flat)
        down = fn()
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    set_flat(head, flat)
    return out


def flat(grads):
    return np.concatenate([g.ravel() for g in grads])


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def grid_batch(n=24, seed=0):
    env, _ = make_gridworld()
    ds = collect_random(env, n, seed)
    return ds, make_batch(ds)


def tabular_dual(mdp, dD, spec, steps=4000, lr=0.1, seed=0):
    ds, w = expected_tabular_dataset(mdp, dD)
    disc = IndexDiscretizer(mdp.n_states, mdp.n_actions)
    st = init_dual_state(spec, TAB, 1, 1, np.random.default_rng(seed), disc)
    cfg = DualConfig(steps=steps, batch_size=None, lr=lr, lr_schedule="linear", tau=0.05, log_every=0)
    train_dual(ds, st, cfg, np.random.default_rng(seed), sample_weight=w)
    return ds, w, disc, st
