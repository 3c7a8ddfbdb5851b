"""Exact tabular solvers used as ground truth.

All routines work on a :class:`~idrl.data.TabularMDP` with distributions
stored as ``(S, A)`` arrays.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from idrl.data import TabularMDP
from idrl.divergence import DivergenceSpec, GENERATORS


class OracleError(RuntimeError):
    pass


def _policy_matrix(mdp: TabularMDP, pi):
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy table must have shape {(mdp.n_states, mdp.n_actions)}")
    if np.any(pi < 0) or np.max(np.abs(pi.sum(axis=1) - 1.0)) > 1e-10:
        raise ValueError("policy rows must be probability vectors")
    return pi


def exact_visitation(mdp: TabularMDP, pi):
    """Normalized discounted state-action occupancy of ``pi`` from ``d0``."""
    pi = _policy_matrix(mdp, pi)
    if not mdp.gamma < 1.0:
        raise OracleError("visitation system is singular for gamma = 1")
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    lhs = np.eye(mdp.n_states) - mdp.gamma * P_pi.T
    try:
        d_s = np.linalg.solve(lhs, (1.0 - mdp.gamma) * mdp.d0)
    except np.linalg.LinAlgError as exc:
        raise OracleError(f"singular visitation system: {exc}") from None
    d = np.maximum(d_s, 0.0)[:, None] * pi
    return d / d.sum()


def value_iteration(mdp: TabularMDP, tol=1e-12, max_iter=100_000):
    """Optimal ``V``, ``Q`` and a deterministic greedy policy (lowest index on ties)."""
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = mdp.R + mdp.gamma * mdp.P @ V
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    Q = mdp.R + mdp.gamma * mdp.P @ V
    best = np.argmax(Q >= Q.max(axis=1, keepdims=True) - 1e-10, axis=1)
    pi = np.zeros_like(Q)
    pi[np.arange(mdp.n_states), best] = 1.0
    return V, Q, pi


def policy_return(mdp: TabularMDP, pi):
    """Expected discounted return from ``d0``."""
    pi = _policy_matrix(mdp, pi)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    r_pi = (pi * mdp.R).sum(axis=1)
    V = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)
    return float(mdp.d0 @ V)


def flow_matrix(mdp: TabularMDP):
    """``A`` with ``(A d)(s) = sum_a d(s,a) - gamma sum d(s~,a~) P(s|s~,a~)`` and ``b = (1-gamma) d0``."""
    S, A = mdp.n_states, mdp.n_actions
    out = np.zeros((S, S * A))
    for s in range(S):
        out[s, s * A:(s + 1) * A] = 1.0
    out -= mdp.gamma * mdp.P.reshape(S * A, S).T
    return out, (1.0 - mdp.gamma) * mdp.d0


def flow_residual(mdp: TabularMDP, d):
    A_mat, b = flow_matrix(mdp)
    return A_mat @ np.asarray(d, dtype=np.float64).ravel() - b


@dataclass
class ExactSolution:
    d: np.ndarray  # (S, A) visitation
    w_sa: np.ndarray  # d / dD, zero where dD = 0
    w_s: np.ndarray  # d(s) / dD(s)
    w_as: np.ndarray  # w_sa / w_s, NaN where the optimum never visits s
    objective: float  # E_d[r] - alpha D_f(d || dD)
    expected_reward: float
    residual: np.ndarray  # per-state flow residual


def _solution(mdp, dD, d, alpha, kind="chi2"):
    gen = GENERATORS[kind]
    dD = np.asarray(dD, dtype=np.float64)
    pos = dD > 0
    w_sa = np.where(pos, d / np.where(pos, dD, 1.0), 0.0)
    d_s, dD_s = d.sum(axis=1), dD.sum(axis=1)
    w_s = np.where(dD_s > 0, d_s / np.where(dD_s > 0, dD_s, 1.0), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        w_as = np.where(w_s[:, None] > 0, w_sa / w_s[:, None], np.nan)
    er = float((d * mdp.R).sum())
    div = float((dD[pos] * gen.f(w_sa[pos])).sum())
    return ExactSolution(d, w_sa, w_s, w_as, er - alpha * div, er, flow_residual(mdp, d))


def active_set_qp(A_mat, b, h, c, x0, tol=1e-13, max_iter=None):
    """Primal active-set solve of ``min sum h x^2 / 2 - c.x  s.t.  A x = b, x >= 0``.

    ``x0`` must be feasible; every iterate stays feasible. ``h > 0`` is the
    diagonal Hessian. Returns ``(x, nu, lam)`` with ``lam >= 0`` the bound
    multipliers at the optimum.
    """
    n = len(c)
    x = np.array(x0, dtype=np.float64)
    free = x > 0
    max_iter = 20 * n + 50 if max_iter is None else max_iter
    scale = 1.0 + np.abs(c).max()
    # the free-set solve cancels terms of size |c / h|, so converge relative to that too
    x_tol = 1e-13 * (1.0 + np.abs(c / h).max())
    for _ in range(max_iter):
        AF, inv_h = A_mat[:, free], 1.0 / h[free]
        nu = np.linalg.lstsq((AF * inv_h) @ AF.T, AF @ (c[free] * inv_h) - b, rcond=None)[0]
        target = np.zeros(n)
        target[free] = (c[free] - AF.T @ nu) * inv_h
        p = target - x
        if np.max(np.abs(np.maximum(target, 0.0) - x)) <= x_tol + 1e-14 * np.max(np.abs(x)):
            lam = A_mat.T @ nu - c
            lam[free] = 0.0
            j = int(np.argmin(lam))
            if lam[j] >= -tol * scale:
                return np.maximum(target, 0.0), nu, np.maximum(lam, 0.0)
            free[j] = True
            continue
        # entries the constraints pin at zero come back as -1e-16 noise; they are not blocking
        shrinking = free & (p < 0) & (target < -1e-13 * (1.0 + np.max(np.abs(x))))
        steps = np.full(n, np.inf)
        steps[shrinking] = -x[shrinking] / p[shrinking]
        j = int(np.argmin(steps))
        if steps[j] < 1.0:
            x = x + steps[j] * p
            x[j] = 0.0
            free[j] = False
        else:
            x = np.maximum(target, 0.0)
    raise OracleError("active-set solve hit its iteration budget")


def project_flow(A_mat, b, y, x0):
    """Euclidean projection of ``y`` onto ``{x >= 0, A x = b}`` from a feasible ``x0``."""
    return active_set_qp(A_mat, b, np.ones(len(y)), np.asarray(y, dtype=np.float64), x0)[0]


def _random_feasible(mdp, J, rng, uniform=False):
    """Visitation of a random policy that only uses pairs in ``J``."""
    S, A = mdp.n_states, mdp.n_actions
    mask = J.reshape(S, A)
    pi = np.where(mask, 1.0 if uniform else rng.random((S, A)) + 1e-3, 0.0)
    empty = pi.sum(axis=1) == 0
    pi[empty] = 1.0  # never visited if the reference covers the reachable pairs
    pi /= pi.sum(axis=1, keepdims=True)
    d = exact_visitation(mdp, pi).ravel()
    if np.any(d[~J] > 1e-12):
        raise ValueError("reference distribution does not cover the pairs reachable from d0")
    return d[J]


def exact_regularized_solution(mdp: TabularMDP, dD, alpha, restarts=10, seed=0,
                               max_iter=300, kind="chi2"):
    """Maximize ``E_d[r] - alpha D_f(d || dD)`` over the Bellman-flow polytope.

    Projected gradient ascent from ``restarts`` random feasible points, with
    backtracking on the step size, followed by an exact active-set solve
    started from the ascent result. Pairs with ``dD = 0`` are held at zero.
    Only the chi-squared generator is supported.
    """
    if kind != "chi2":
        raise NotImplementedError("exact solver implemented for chi2 only")
    dD = np.asarray(dD, dtype=np.float64)
    S, A = mdp.n_states, mdp.n_actions
    if dD.shape != (S, A) or np.any(dD < 0):
        raise ValueError("dD must be a non-negative (S, A) array")
    if S * A > 200:
        raise ValueError("exact solver is capped at 200 state-action pairs")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    J = dD.ravel() > 0
    A_full, b = flow_matrix(mdp)
    A_mat = A_full[:, J]
    r = mdp.R.ravel()[J]
    ref = dD.ravel()[J]
    h = 2.0 * alpha / ref
    c = r + h * ref

    def obj(x):
        return r @ x - 0.5 * h @ ((x - ref) ** 2)

    rng = np.random.default_rng(seed)
    best = None
    for k in range(restarts):
        x = _random_feasible(mdp, J, rng, uniform=(k == 0))
        step = 1.0 / h.max()
        f_x = obj(x)
        for _ in range(max_iter):
            g = r - h * (x - ref)
            while True:
                x_new = project_flow(A_mat, b, x + step * g, x)
                f_new = obj(x_new)
                if f_new >= f_x - 1e-14 * max(1.0, abs(f_x)) or step < 1e-14:
                    break
                step *= 0.5
            moved = np.max(np.abs(x_new - x))
            x, f_x = x_new, f_new
            step *= 1.5
            if moved < 1e-9:
                break
        x = active_set_qp(A_mat, b, h, c, x)[0]
        f_x = obj(x)
        if best is None or f_x > best[0]:
            best = (f_x, x)
    d = np.zeros(S * A)
    d[J] = best[1]
    sol = _solution(mdp, dD, d.reshape(S, A), alpha)
    if np.max(np.abs(sol.residual)) > 1e-8:
        raise OracleError(f"flow residual {np.max(np.abs(sol.residual)):.2e} after the final solve")
    return sol


def dual_regularized_solution(mdp: TabularMDP, dD, alpha, tol=1e-13, max_iter=500):
    """Same optimum reached through the unconstrained dual in ``V``::

        min_V (1 - gamma) E_d0[V] + alpha E_dD[f_p*((R + gamma P V - V) / alpha)]

    with ``d = dD * max(0, (f')^-1((R + gamma P V - V) / alpha))``.
    """
    gen = GENERATORS["chi2"]
    dD = np.asarray(dD, dtype=np.float64)
    S, A = mdp.n_states, mdp.n_actions
    M = mdp.gamma * mdp.P.reshape(S * A, S) - np.repeat(np.eye(S), A, axis=0)
    R, p = mdp.R.ravel(), dD.ravel()
    c0 = (1.0 - mdp.gamma) * mdp.d0

    def parts(V):
        y = (R + M @ V) / alpha
        return c0 @ V + alpha * p @ gen.f_p_star(y), y

    V = np.zeros(S)
    L, y = parts(V)
    for _ in range(max_iter):
        grad = c0 + M.T @ (p * gen.f_p_star_prime(y))
        if np.max(np.abs(grad)) < tol:
            break
        curv = p * 0.5 * (y > -2.0) / alpha
        H = (M * curv[:, None]).T @ M + 1e-12 * np.eye(S)
        step = np.linalg.solve(H, grad)
        t = 1.0
        while True:
            L_new, y_new = parts(V - t * step)
            if L_new <= L - 1e-4 * t * grad @ step or t < 1e-12:
                break
            t *= 0.5
        V, L, y = V - t * step, L_new, y_new
    d = (p * gen.f_p_star_prime(y)).reshape(S, A)
    return _solution(mdp, dD, d, alpha), V


def semi_gradient_fixed_point(mdp: TabularMDP, mu, alpha=None, spec: DivergenceSpec | None = None,
                              tol=1e-12, max_iter=100_000):
    """Joint fixed point of ``Q = R + gamma P V`` and, per state,
    ``E_mu[max(0, (f')^-1((Q - V)/scale))] = target`` solved by bisection.

    Give either ``alpha`` (alpha form) or a full ``spec``. Returns ``(V, Q, w_as)``.
    """
    if spec is None:
        if alpha is None:
            raise ValueError("give alpha or spec")
        spec = DivergenceSpec(alpha=alpha, mode="alpha")
    mu = np.asarray(mu, dtype=np.float64)
    gen, scale, target = spec.gen, spec.scale, spec.target_mass
    covered = mu.sum(axis=1) > 0

    def solve_v(Q):
        lo = Q.min(axis=1) - 2.0 * scale * (max(target, 1.0) + 1.0)
        hi = Q.max(axis=1) + 2.0 * scale
        mass = lambda v: (mu * gen.f_p_star_prime((Q - v[:, None]) / scale)).sum(axis=1)
        if np.any(mass(lo)[covered] < target) or np.any(mass(hi)[covered] > target):
            raise OracleError("bisection bracket does not enclose the root")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            above = mass(mid) > target
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
            if np.max(hi - lo) < 1e-15 * max(1.0, np.max(np.abs(mid))):
                break
        return 0.5 * (lo + hi)

    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = mdp.R + mdp.gamma * mdp.P @ V
        V_new = np.where(covered, solve_v(Q), Q.max(axis=1))
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    Q = mdp.R + mdp.gamma * mdp.P @ V
    w_as = gen.f_p_star_prime((Q - V[:, None]) / scale)
    return V, Q, w_as


def check_monotonicity(mdp: TabularMDP, dD0, alpha, iterations):
    """Expected reward of the regularized optimum over repeated rounds, each
    round regularizing toward the previous optimum restricted to its support."""
    values, dD = [], np.asarray(dD0, dtype=np.float64)
    for _ in range(iterations):
        sol = exact_regularized_solution(mdp, dD, alpha)
        values.append(sol.expected_reward)
        dD = np.where(sol.d > 1e-15, sol.d, 0.0)
        dD = dD / dD.sum()
    return values


def tabular_correction(mdp: TabularMDP, dD, w_as, tol=1e-13, max_iter=200):
    """Exact-expectation transcription of the U/W correction problem.

    Minimizes over tabular ``U``::

        E_dD[U(s) - gamma E_P U(s')] + E_dD(s)[f_p*(E_mu[w(a|s)(gamma E_P U(s') - U(s))])]

    by damped Newton and returns ``(W, U)`` with ``W(s) = max(0, (f')^-1(inner))``.
    When ``dD`` is the visitation of the behavior policy from ``d0`` and
    ``w_as * mu`` is a policy, ``W`` equals ``d^pi(s) / dD(s)``.
    """
    gen = GENERATORS["chi2"]
    dD = np.asarray(dD, dtype=np.float64)
    w_as = np.asarray(w_as, dtype=np.float64)
    S, A = mdp.n_states, mdp.n_actions
    dD_s = dD.sum(axis=1)
    mu = np.where(dD_s[:, None] > 0, dD / np.where(dD_s[:, None] > 0, dD_s[:, None], 1.0), 0.0)
    G = mdp.gamma * mdp.P - np.eye(S)[:, None, :]  # (S, A, S): e.g. gamma P(.|s,a) - e_s
    c = -np.einsum("sa,sat->t", dD, G)
    B = np.einsum("sa,sat->st", mu * w_as, G)

    def parts(U):
        x = B @ U
        return c @ U + dD_s @ gen.f_p_star(x), x

    U = np.zeros(S)
    L, x = parts(U)
    for _ in range(max_iter):
        grad = c + B.T @ (dD_s * gen.f_p_star_prime(x))
        if np.max(np.abs(grad)) < tol:
            break
        H = (B * (dD_s * 0.5 * (x > -2.0))[:, None]).T @ B + 1e-13 * np.eye(S)
        step = np.linalg.solve(H, grad)
        t = 1.0
        while True:
            L_new, x_new = parts(U - t * step)
            if L_new <= L - 1e-4 * t * grad @ step or t < 1e-12:
                break
            t *= 0.5
        U, L, x = U - t * step, L_new, x_new
    return np.maximum(0.0, gen.f_prime_inv(x)), U


def dump_solution_csv(sol: ExactSolution, path):
    S, A = sol.d.shape
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["state", "action", "d", "w_sa", "w_s", "w_as", "flow_residual"])
        for s in range(S):
            for a in range(A):
                wr.writerow([s, a, repr(float(sol.d[s, a])), repr(float(sol.w_sa[s, a])),
                             repr(float(sol.w_s[s])), repr(float(sol.w_as[s, a])),
                             repr(float(sol.residual[s]))])


# ---------------------------------------------------------------------------
# Named micro-MDPs


def bandit_mdp(rewards=(1.0, 0.0), gamma=0.0):
    """One state, one action per reward, every action self-loops."""
    A = len(rewards)
    return TabularMDP(np.ones((1, A, 1)), np.array([rewards], dtype=float), np.ones(1), gamma)


def chain2_mdp(gamma=0.9):
    """Two states: ``a0`` in ``s0`` stays with reward 1, ``a1`` moves to ``s1``;
    both actions in ``s1`` pay nothing, ``a0`` returns to ``s0``."""
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[0, 1, 1] = P[1, 0, 0] = P[1, 1, 1] = 1.0
    R = np.array([[1.0, 0.0], [0.0, 0.0]])
    return TabularMDP(P, R, np.array([1.0, 0.0]), gamma)


def random_mdp(n_states, n_actions, gamma, seed):
    rng = np.random.default_rng(seed)
    P = rng.random((n_states, n_actions, n_states)) ** 3
    P /= P.sum(axis=2, keepdims=True)
    R = rng.random((n_states, n_actions))
    d0 = rng.random(n_states)
    return TabularMDP(P, R, d0 / d0.sum(), gamma)


def corrupted_mdp(gamma=0.5):
    """One self-looping state with a rewarding and a non-rewarding action;
    paired with a uniform reference this is a half-corrupted dataset."""
    return bandit_mdp((1.0, 0.0), gamma)


MICRO_MDPS = {"bandit": bandit_mdp, "chain2": chain2_mdp, "corrupted": corrupted_mdp,
              "random3": lambda gamma=0.8: random_mdp(3, 2, gamma, 0)}
