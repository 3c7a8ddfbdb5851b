import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idrl.data import TabularMDP
from idrl.divergence import DivergenceSpec
from idrl.oracle import (MICRO_MDPS, OracleError, bandit_mdp, chain2_mdp, check_monotonicity,
                         corrupted_mdp, dual_regularized_solution, dump_solution_csv,
                         exact_regularized_solution, exact_visitation, flow_residual, random_mdp,
                         semi_gradient_fixed_point, tabular_correction, value_iteration)


def uniform(mdp):
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def test_single_self_loop():
    mdp = TabularMDP(np.ones((1, 1, 1)), np.zeros((1, 1)), np.ones(1), 0.9)
    assert exact_visitation(mdp, [[1.0]]).tolist() == [[1.0]]


def test_two_state_geometric_series():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = P[1, 0, 1] = 1.0
    mdp = TabularMDP(P, np.zeros((2, 1)), np.array([1.0, 0.0]), 0.5)
    assert exact_visitation(mdp, np.ones((2, 1))).ravel() == pytest.approx([0.5, 0.5], abs=1e-14)


def test_singular_system():
    mdp = bandit_mdp(gamma=0.0)
    object.__setattr__(mdp, "gamma", 1.0)
    with pytest.raises(OracleError):
        exact_visitation(mdp, [[0.5, 0.5]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.95))
def test_visitation_is_feasible_distribution(seed, gamma):
    mdp = random_mdp(4, 3, gamma, seed)
    pi = np.random.default_rng(seed).dirichlet(np.ones(3), size=4)
    d = exact_visitation(mdp, pi)
    assert np.all(d >= 0) and d.sum() == pytest.approx(1.0, abs=1e-10)
    assert np.max(np.abs(flow_residual(mdp, d))) < 1e-10


def test_bandit_regularized_solution():
    mdp = bandit_mdp((1.0, 0.0), 0.0)
    sol = exact_regularized_solution(mdp, np.full((1, 2), 0.5), 0.25)
    assert sol.w_sa[0] == pytest.approx([2.0, 0.0], abs=1e-9)
    grid = np.linspace(0, 1, 100_001)
    best = grid[np.argmax(grid - 0.25 * (2 * grid - 1) ** 2)]
    assert sol.d[0, 0] == pytest.approx(best, abs=1e-5)


def test_large_alpha_returns_feasible_reference():
    mdp = random_mdp(4, 2, 0.8, 1)
    dD = exact_visitation(mdp, uniform(mdp))
    sol = exact_regularized_solution(mdp, dD, 1e4)
    assert np.max(np.abs(sol.w_sa - 1.0)) < 1e-2


def test_small_alpha_concentrates_on_optimal_policy():
    mdp = chain2_mdp(0.9)
    _, _, pi = value_iteration(mdp)
    d_opt = exact_visitation(mdp, pi)
    sol = exact_regularized_solution(mdp, exact_visitation(mdp, uniform(mdp)), 1e-4)
    assert np.max(np.abs(sol.d - d_opt)) < 1e-2


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("alpha", [0.05, 0.5, 5.0])
def test_primal_and_dual_routes_agree(seed, alpha):
    mdp = random_mdp(4, 3, 0.8, seed)
    dD = np.random.default_rng(seed).dirichlet(np.ones(12)).reshape(4, 3)
    primal = exact_regularized_solution(mdp, dD, alpha)
    dual, _ = dual_regularized_solution(mdp, dD, alpha)
    assert np.max(np.abs(primal.d - dual.d)) < 1e-7
    assert primal.objective == pytest.approx(dual.objective, abs=1e-9)
    assert np.max(np.abs(primal.residual)) < 1e-8 and np.all(primal.d >= 0)


def test_semi_gradient_bandit():
    V, _, w = semi_gradient_fixed_point(bandit_mdp((1.0, 0.0), 0.0), np.full((1, 2), 0.5), alpha=0.25)
    assert V[0] == pytest.approx(0.5, abs=1e-12)
    assert w[0] == pytest.approx([2.0, 0.0], abs=1e-12)
    assert 0.5 * w[0].sum() == pytest.approx(1.0, abs=1e-12)


def test_semi_gradient_zero_rewards():
    mdp = random_mdp(3, 2, 0.9, 5)
    mdp = TabularMDP(mdp.P, np.zeros_like(mdp.R), mdp.d0, mdp.gamma)
    _, _, w = semi_gradient_fixed_point(mdp, uniform(mdp), alpha=0.7)
    assert np.allclose(w, 1.0, atol=1e-10)


@pytest.mark.parametrize("alpha", [0.1, 0.25, 1.0])
def test_cross_oracle_at_gamma_zero(alpha):
    mdp = bandit_mdp((1.0, 0.3, -0.2), 0.0)
    dD = np.full((1, 3), 1 / 3)
    sol = exact_regularized_solution(mdp, dD, alpha)
    _, _, w = semi_gradient_fixed_point(mdp, dD, alpha=alpha)
    assert np.max(np.abs(sol.w_as - w)) < 1e-6


def test_lambda_form_fixed_point_mass():
    spec = DivergenceSpec(lam=0.6)
    mdp = chain2_mdp(0.9)
    _, _, w = semi_gradient_fixed_point(mdp, uniform(mdp), spec=spec)
    assert np.allclose((uniform(mdp) * w).sum(1), spec.target_mass, atol=1e-10)


def test_semi_gradient_needs_alpha_or_spec():
    with pytest.raises(ValueError):
        semi_gradient_fixed_point(chain2_mdp(), np.full((2, 2), 0.5))


def test_action_ratio_positive_where_optimum_never_visits():
    # s1 pays nothing; the regularized optimum stays in s0 while mu wanders into s1
    mdp = chain2_mdp(0.9)
    dD = exact_visitation(mdp, uniform(mdp))
    alpha = 0.01
    sol = exact_regularized_solution(mdp, dD, alpha)
    _, _, w_semi = semi_gradient_fixed_point(mdp, uniform(mdp), alpha=alpha)
    assert np.all(sol.w_sa[1] < 1e-3)
    assert w_semi[1].max() > 0.5


@pytest.mark.parametrize("seed", [0, 3, 7])
def test_tabular_correction_recovers_state_ratio(seed):
    mdp = random_mdp(5, 3, 0.9, seed)
    rng = np.random.default_rng(seed)
    mu = rng.dirichlet(np.ones(3), size=5)
    pi = rng.dirichlet(np.ones(3), size=5)
    dD = exact_visitation(mdp, mu)
    d_pi = exact_visitation(mdp, pi)
    W, _ = tabular_correction(mdp, dD, pi / mu)
    assert np.max(np.abs(W - d_pi.sum(1) / dD.sum(1))) < 1e-3


MONO = ["corrupted", "bandit", "chain2", "random3"]


@pytest.mark.parametrize("name", MONO)
def test_monotonicity(name):
    mdp = MICRO_MDPS[name]()
    dD0 = exact_visitation(mdp, uniform(mdp))
    vals = check_monotonicity(mdp, dD0, 0.5, 4)
    assert all(b >= a - 1e-8 for a, b in zip(vals, vals[1:]))


def test_corrupted_sequence_strictly_increases_until_pure():
    mdp = corrupted_mdp()
    vals = check_monotonicity(mdp, np.full((1, 2), 0.5), 0.4, 5)
    k = next(i for i, v in enumerate(vals) if v > 1 - 1e-12)
    assert all(b > a for a, b in zip(vals[:k], vals[1:k + 1]))
    assert vals[0] == pytest.approx(0.5 + 1 / (8 * 0.4), abs=1e-9)
    assert all(v == pytest.approx(1.0, abs=1e-12) for v in vals[k:])


def test_large_alpha_sequence_nearly_constant():
    mdp = chain2_mdp(0.9)
    vals = check_monotonicity(mdp, exact_visitation(mdp, uniform(mdp)), 1e4, 3)
    assert max(vals) - min(vals) < 1e-3


def test_size_cap():
    mdp = random_mdp(70, 3, 0.5, 0)
    with pytest.raises(ValueError, match="200"):
        exact_regularized_solution(mdp, np.full((70, 3), 1 / 210), 1.0)


def test_dump_csv(tmp_path):
    sol = exact_regularized_solution(chain2_mdp(0.9), np.full((2, 2), 0.25), 0.5)
    dump_solution_csv(sol, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "state,action,d,w_sa,w_s,w_as,flow_residual" and len(lines) == 5
