import numpy as np
import pytest
from helpers import NET, TAB, flat, grid_batch, numeric_grad, rel_err, tabular_dual

from idrl.batching import make_batch
from idrl.data import IndexDiscretizer, TransitionDataset
from idrl.divergence import DivergenceSpec
from idrl.dual import (DualConfig, action_ratio, init_dual_state, orthogonal_v_grad, q_loss,
                       q_loss_grad, train_dual, v_loss, v_loss_grad)
from idrl.oracle import bandit_mdp, chain2_mdp, random_mdp, semi_gradient_fixed_point


def net_state(spec, seed=0):
    st = init_dual_state(spec, NET, 2, 2, np.random.default_rng(seed))
    # decorrelate the target from the live Q so the V gradient sees a non-trivial residual
    st.Q_target.head = init_dual_state(spec, NET, 2, 2, np.random.default_rng(seed + 1)).Q
    return st


@pytest.mark.parametrize("spec", [DivergenceSpec(lam=0.6), DivergenceSpec(alpha=0.5, mode="alpha")])
def test_v_loss_gradient(spec):
    _, batch = grid_batch()
    batch.r = batch.r + np.random.default_rng(0).normal(size=len(batch.r))
    st = net_state(spec)
    _, g = v_loss_grad(batch, st)
    assert rel_err(flat(g), numeric_grad(lambda: v_loss(batch, st), st.V)) < 1e-4


def test_q_loss_gradient():
    _, batch = grid_batch(seed=1)
    st = net_state(DivergenceSpec(lam=0.6))
    _, g = q_loss_grad(batch, st)
    assert rel_err(flat(g), numeric_grad(lambda: q_loss(batch, st), st.Q)) < 1e-4


def one_row(r=0.0, done=False, gamma=0.9):
    return TransitionDataset([0.0], [0.0], [r], [1.0], [done], [0], [0], discount=gamma)


def tab_state(spec, v=0.0, q=0.0, v_next=0.0):
    disc = IndexDiscretizer(2, 1)
    st = init_dual_state(spec, TAB, 1, 1, np.random.default_rng(0), disc)
    st.V.table[:] = [v, v_next]
    st.Q.table[:] = [q, 0.0]
    st.Q_target.head.table[:] = [q, 0.0]
    return st


def test_v_loss_examples():
    spec = DivergenceSpec(alpha=1.0, mode="alpha")
    # Qbar = V: loss is V + f_p*(0) = V
    assert v_loss(make_batch(one_row()), tab_state(spec, v=2.0, q=2.0)) == pytest.approx(2.0)
    # residual far below the kink: conjugate is -1
    assert v_loss(make_batch(one_row()), tab_state(spec, v=5.0, q=0.0)) == pytest.approx(4.0)


def test_q_loss_examples():
    spec = DivergenceSpec(lam=0.6)
    st = tab_state(spec, q=0.5, v_next=2.0)
    assert q_loss(make_batch(one_row(r=1.0)), st) == pytest.approx((1.0 + 0.9 * 2.0 - 0.5) ** 2)
    assert q_loss(make_batch(one_row(r=1.0, done=True)), st) == pytest.approx(0.25)


def test_action_ratio_examples():
    spec = DivergenceSpec(alpha=1.0, mode="alpha")
    st = tab_state(spec, v=0.0, q=2.0)
    assert action_ratio(st, [[0.0]], [[0.0]])[0] == pytest.approx(2.0)
    st = tab_state(spec, v=3.0, q=0.0)
    assert action_ratio(st, [[0.0]], [[0.0]])[0] == 0.0


def test_zero_steps_leaves_initialization():
    ds, batch = grid_batch()
    st = init_dual_state(DivergenceSpec(lam=0.6), NET, 2, 2, np.random.default_rng(0))
    before = st.V(ds.s).copy()
    train_dual(ds, st, DualConfig(steps=0), np.random.default_rng(0))
    assert np.array_equal(st.V(ds.s), before)


def per_state_mass(mdp, dD, st, disc):
    s = np.repeat(np.arange(mdp.n_states), mdp.n_actions).astype(float)
    a = np.tile(np.arange(mdp.n_actions), mdp.n_states).astype(float)
    w = action_ratio(st, s[:, None], a[:, None]).reshape(mdp.n_states, mdp.n_actions)
    mu = dD / dD.sum(axis=1, keepdims=True)
    return (mu * w).sum(axis=1), w


MICRO = {"bandit": lambda: bandit_mdp(gamma=0.0), "chain2": lambda: chain2_mdp(0.9),
         "random": lambda: random_mdp(3, 2, 0.8, 4)}


@pytest.mark.parametrize("name", sorted(MICRO))
def test_stationarity_alpha_form(name):
    mdp = MICRO[name]()
    dD = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.P[:, :, 0].size)
    spec = DivergenceSpec(alpha=0.5, mode="alpha")
    _, _, disc, st = tabular_dual(mdp, dD, spec, steps=6000)
    mass, w = per_state_mass(mdp, dD, st, disc)
    assert np.max(np.abs(mass - 1.0)) < 1e-3
    _, _, w_ref = semi_gradient_fixed_point(mdp, dD / dD.sum(1, keepdims=True), spec=spec)
    assert np.max(np.abs(w - w_ref)) < 1e-3


def test_stationarity_lambda_form_target_mass():
    mdp = chain2_mdp(0.9)
    dD = np.full((2, 2), 0.25)
    spec = DivergenceSpec(lam=0.6)
    _, _, disc, st = tabular_dual(mdp, dD, spec, steps=6000)
    mass, _ = per_state_mass(mdp, dD, st, disc)
    assert np.max(np.abs(mass - spec.target_mass)) < 1e-3


def test_bandit_closed_form():
    mdp = bandit_mdp((1.0, 0.0), gamma=0.0)
    dD = np.full((1, 2), 0.5)
    spec = DivergenceSpec(alpha=0.25, mode="alpha")
    V_ref, _, w_ref = semi_gradient_fixed_point(mdp, np.full((1, 2), 0.5), spec=spec)
    assert V_ref[0] == pytest.approx(0.5, abs=1e-12)
    assert w_ref[0].tolist() == pytest.approx([2.0, 0.0], abs=1e-12)
    _, _, disc, st = tabular_dual(mdp, dD, spec, steps=6000)
    assert st.V.table[0] == pytest.approx(0.5, abs=1e-3)
    assert per_state_mass(mdp, dD, st, disc)[1][0] == pytest.approx([2.0, 0.0], abs=1e-3)


def orth_setup():
    ds, batch = grid_batch(seed=3)
    st = net_state(DivergenceSpec(alpha=1.0, mode="alpha"))
    return ds, batch, st


def test_orthogonal_gradient_shapes_and_finite():
    _, batch, st = orth_setup()
    g = orthogonal_v_grad(batch, st, eta=1.0)
    assert [x.shape for x in g] == [p.shape for p in st.V.params]
    assert np.all(np.isfinite(flat(g)))


def test_orthogonal_gradient_parallel_case_reduces_to_semi_gradient():
    # s' = s makes the bootstrap gradient parallel to the forward one, so its projection vanishes
    s = np.array([[0.3, 0.4], [1.2, 2.5], [3.5, 0.5]])
    ds = TransitionDataset(s, np.zeros((3, 2)), [0.5, -1.0, 2.0], s, [False] * 3, [0, 1, 2], [0, 0, 0],
                           discount=0.9)
    batch = make_batch(ds)
    st = net_state(DivergenceSpec(alpha=1.0, mode="alpha"))
    a = flat(orthogonal_v_grad(batch, st, eta=1.0))
    b = flat(orthogonal_v_grad(batch, st, eta=0.0))
    assert np.allclose(a, b, atol=1e-12)


def test_orthogonal_gradient_eta_linear():
    _, batch, st = orth_setup()
    g0, g1, g2 = (flat(orthogonal_v_grad(batch, st, eta=e)) for e in (0.0, 1.0, 2.0))
    assert np.allclose(g2 - g0, 2 * (g1 - g0), atol=1e-12)
