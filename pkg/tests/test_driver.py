from dataclasses import replace

import numpy as np
import pytest

from idrl.correction import CorrectionConfig
from idrl.data import ACTION_VECTORS, GridworldSpec, TransitionDataset, collect_random, make_gridworld
from idrl.divergence import DivergenceSpec
from idrl.driver import (BCConfig, DiscriminatorConfig, DiscriminatorHead, EmptyFilterError,
                         GaussianPolicy, IDRLConfig, RatioEstimate, TablePolicy, ZeroWeightsError,
                         dwbc_weights, evaluate_policy, filter_dataset, fragment_lengths,
                         optimal_dwbc, run_idrl, top_trajectories, weighted_bc)
from idrl.dual import DualConfig
from idrl.nn import BackendConfig, MLPHead


def rows(n, r=None, traj=None, t=None):
    s = np.arange(n, dtype=float)
    return TransitionDataset(s, np.zeros(n), np.zeros(n) if r is None else r, s + 1, np.zeros(n, bool),
                             np.arange(n) if traj is None else traj,
                             np.zeros(n, int) if t is None else t)


@pytest.mark.parametrize("w, thr, keep", [([0.5, 0.0, 1.2], 0.0, [0, 2]), ([0.5, 1.5], 1.0, [1]),
                                          ([1.0, 2.0, 3.0], 0.0, [0, 1, 2])])
def test_filter_examples(w, thr, keep):
    ds = rows(len(w))
    out = filter_dataset(ds, np.array(w), thr)
    assert out.s[:, 0].tolist() == [float(i) for i in keep]
    assert out.traj.tolist() == keep


def test_filter_all_positive_is_identity():
    ds = rows(4)
    out = filter_dataset(ds, np.ones(4))
    assert all(np.array_equal(getattr(out, k), getattr(ds, k)) for k in ("s", "a", "r", "s2", "traj", "t"))


def test_filter_empty_names_iteration():
    with pytest.raises(EmptyFilterError, match="iteration 2"):
        filter_dataset(rows(3), np.zeros(3), iteration=2)


def test_filter_accepts_ratio_estimate():
    est = RatioEstimate(np.ones(3), np.array([0.0, 1.0, 1.0]), np.array([0.0, 1.0, 1.0]))
    assert len(filter_dataset(rows(3), est)) == 2
    assert est.weights("action").tolist() == [1.0, 1.0, 1.0]
    with pytest.raises(ValueError):
        est.weights("both")


def test_fragment_lengths():
    traj = np.array([0, 0, 0, 1, 1])
    t = np.array([0, 1, 3, 0, 1])
    s = np.array([0.0, 1.0, 5.0, 10.0, 11.0])
    ds = TransitionDataset(s, np.zeros(5), np.zeros(5), s + 1, np.zeros(5, bool), traj, t)
    assert sorted(fragment_lengths(ds).tolist()) == [1, 2, 2]


def two_actions():
    return TransitionDataset([[0.0], [0.0]], [[1.0], [-1.0]], [0, 0], [[1.0], [1.0]], [True, True],
                             [0, 1], [0, 0])


BC = BCConfig(steps=1500, batch_size=None, lr=1e-2, hidden=(16,))


def fitted_mean(policy):
    return float(policy.mean(np.array([[0.0]]))[0, 0])


def test_bc_zero_weight_sample_ignored():
    pol = weighted_bc(two_actions(), [1.0, 0.0], BC, np.random.default_rng(0))
    assert fitted_mean(pol) == pytest.approx(1.0, abs=1e-2)


def test_bc_equal_weights_average():
    pol = weighted_bc(two_actions(), [1.0, 1.0], BC, np.random.default_rng(0))
    assert fitted_mean(pol) == pytest.approx(0.0, abs=1e-2)


def test_bc_weight_scaling_invariance():
    env, _ = make_gridworld()
    ds = collect_random(env, 200, 0)
    w = np.random.default_rng(1).uniform(0, 1, 200)
    cfg = BCConfig(steps=300, batch_size=64, hidden=(16,))
    a = weighted_bc(ds, w, cfg, np.random.default_rng(2))
    b = weighted_bc(ds, 37.0 * w, cfg, np.random.default_rng(2))
    assert np.max(np.abs(a.mean(ds.s) - b.mean(ds.s))) < 1e-3


def test_bc_rejects_bad_weights():
    with pytest.raises(ZeroWeightsError):
        weighted_bc(two_actions(), [0.0, 0.0], BC, np.random.default_rng(0))
    with pytest.raises(ValueError):
        weighted_bc(two_actions(), [-1.0, 1.0], BC, np.random.default_rng(0))


def test_bc_loss_gradient():
    from helpers import flat, numeric_grad, rel_err
    rng = np.random.default_rng(0)
    pol = GaussianPolicy.create(2, 2, (8, 8), "tanh", rng, log_std=-0.3)
    S, A = rng.normal(size=(12, 2)), rng.normal(size=(12, 2))
    p = rng.dirichlet(np.ones(12))
    _, g = pol.nll_grad(S, A, p)
    g_mean = numeric_grad(lambda: pol.nll_grad(S, A, p)[0], pol.mean_head)
    assert rel_err(flat(g[:-1]), g_mean) < 1e-4
    eps = 1e-6
    num_ls = []
    for i in range(2):
        pol.log_std[i] += eps
        up = pol.nll_grad(S, A, p)[0]
        pol.log_std[i] -= 2 * eps
        down = pol.nll_grad(S, A, p)[0]
        pol.log_std[i] += eps
        num_ls.append((up - down) / (2 * eps))
    assert rel_err(g[-1], np.array(num_ls)) < 1e-4


def test_log_prob_matches_loss():
    rng = np.random.default_rng(3)
    pol = GaussianPolicy.create(2, 2, (4,), "relu", rng, log_std=0.2)
    S, A = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    p = np.full(5, 0.2)
    assert pol.nll_grad(S, A, p)[0] == pytest.approx(-p @ pol.log_prob(S, A))


def test_log_std_clipped():
    pol = GaussianPolicy(MLPHead(1, (2,), 1), [10.0])
    assert pol.log_std[0] == 2.0 and pol.std[0] > 0


def test_policy_save_load(tmp_path):
    pol = GaussianPolicy.create(2, 2, (4,), "relu", np.random.default_rng(0), log_std=-1.0)
    pol.save(tmp_path / "p.ckpt")
    back = GaussianPolicy.load(tmp_path / "p.ckpt")
    S = np.random.default_rng(1).normal(size=(3, 2))
    assert np.array_equal(back.mean(S), pol.mean(S)) and back.log_std.tolist() == [-1.0, -1.0]


CORRIDOR = GridworldSpec(width=2, height=1, start=(0, 0), goal=(1, 0))


class Fixed:
    def __init__(self, a):
        self.a = np.asarray(a, float)

    def act(self, obs, rng=None, deterministic=True):
        return self.a


def test_eval_corridor_goal_reward():
    env, _ = make_gridworld(CORRIDOR)
    ev = evaluate_policy(env, Fixed([1.0, 0.0]), 3, 0)
    assert ev.mean == CORRIDOR.goal_reward and ev.reached.all() and ev.lengths.tolist() == [1, 1, 1]


def test_eval_zero_episodes():
    env, _ = make_gridworld(CORRIDOR)
    with pytest.raises(ValueError):
        evaluate_policy(env, Fixed([1.0, 0.0]), 0, 0)


def test_eval_same_seed_identical():
    env, mdp = make_gridworld()
    pol = TablePolicy(env, np.full((mdp.n_states, 4), 0.25), ACTION_VECTORS)
    a = evaluate_policy(env, pol, 5, 11, deterministic=False)
    b = evaluate_policy(env, pol, 5, 11, deterministic=False)
    assert a.returns.tolist() == b.returns.tolist() and a.lengths.tolist() == b.lengths.tolist()


def test_eval_discounted_return():
    env, _ = make_gridworld()
    # up four times then right four times along the left and top edges
    class Path:
        def act(self, obs, rng=None, deterministic=True):
            x, y = np.floor(obs).astype(int)
            return ACTION_VECTORS[0] if y < 4 else ACTION_VECTORS[3]
    ev = evaluate_policy(env, Path(), 2, 0)
    assert ev.discounted_mean == pytest.approx(0.99 ** 7, abs=1e-12)


@pytest.mark.parametrize("d, want", [(0.5, 1.0), (0.8, 4.0), (0.1, 0.0)])
def test_dwbc_weights(d, want):
    assert dwbc_weights(np.array([d]), 0.5)[0] == pytest.approx(want)


def test_discriminator_output_open_interval():
    head = DiscriminatorHead(MLPHead(1, (2,), 1))
    head.net.params[-2][:] = 1e6
    out = head(np.array([[1.0], [-1.0]]))
    assert np.all((out > 0) & (out < 1))


def small_gridworld_data():
    env, _ = make_gridworld()
    return env, collect_random(env, 300, 0)


def test_dwbc_infinite_delta_zeroes_weights():
    env, ds = small_gridworld_data()
    with pytest.raises(ZeroWeightsError):
        optimal_dwbc(ds, ds.subset(np.arange(20)), np.inf, BCConfig(steps=5),
                     DiscriminatorConfig(steps=5, batch_size=8))


def test_top_trajectories_keeps_best():
    traj = np.array([0, 0, 1, 2])
    t = np.array([0, 1, 0, 0])
    s = np.array([0.0, 1.0, 10.0, 20.0])
    ds = TransitionDataset(s, np.zeros(4), [2.0, 3.0, 1.0, 0.0], s + 1, np.zeros(4, bool), traj, t)
    assert top_trajectories(ds, 34).tolist() == [0, 1]
    assert top_trajectories(ds, 100).tolist() == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        top_trajectories(ds, 0)


def test_top_trajectories_needs_complete():
    ds = rows(2, t=np.array([1, 2]), traj=np.array([0, 1]))
    with pytest.raises(ValueError, match="complete"):
        top_trajectories(ds, 50)


LOOP = IDRLConfig(M=2, spec=DivergenceSpec(lam=0.6),
                  dual=DualConfig(steps=200, batch_size=None, lr=0.1, log_every=100),
                  correction=CorrectionConfig(steps=200, batch_size=None, lr=0.1, beta1=0.0,
                                              log_every=100),
                  bc=BCConfig(steps=100, hidden=(16,)), backend=BackendConfig("tabular"))


def test_loop_shrinks_and_reports():
    env, ds = small_gridworld_data()
    res = run_idrl(ds, LOOP, env=env, disc=env)
    sizes = [r.n_transitions for r in res.reports]
    assert sizes[0] == len(ds) and all(b <= a for a, b in zip(sizes, sizes[1:]))
    assert [r.iteration for r in res.reports] == [1, 2]
    assert {row[1] for row in res.curves} == {"dual", "correction"}
    assert len(res.ratios[1].combined) == len(res.datasets[1])


def test_loop_deterministic(tmp_path):
    env, ds = small_gridworld_data()
    a = run_idrl(ds, LOOP, env=env, disc=env)
    b = run_idrl(ds, LOOP, env=env, disc=env)
    assert [r.row() for r in a.reports] == [r.row() for r in b.reports]
    a.policy.save(tmp_path / "a.ckpt")
    b.policy.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_single_iteration_never_filters():
    env, ds = small_gridworld_data()
    res = run_idrl(ds, replace(LOOP, M=1), env=env, disc=env)
    assert len(res.datasets) == 1 and res.datasets[0] == ds


def test_config_validation():
    with pytest.raises(ValueError):
        IDRLConfig(M=0)
    with pytest.raises(ValueError):
        IDRLConfig(ratio_mode="state")
