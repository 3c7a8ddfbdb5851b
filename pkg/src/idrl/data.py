"""Transition datasets, tabular MDPs, the gridworld toycase, dataset
mixing, reward normalization and the line-oriented dataset file format."""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    def __init__(self, line, msg):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    traj_id: int
    step: int


def _frozen(x, dtype):
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """Immutable columnar store of ``(s, a, r, s', done)`` records.

    Arrays are read-only; every transformation returns a new dataset.
    """

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    traj: np.ndarray
    t: np.ndarray
    discount: float = 0.99
    name: str = "dataset"
    provenance: str = ""

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        if s.ndim == 1:
            s = s[:, None]
        if a.ndim == 1:
            a = a[:, None]
        n = s.shape[0]
        s2 = np.asarray(self.s2, dtype=np.float64).reshape(n, -1) if n else np.zeros((0, s.shape[1]))
        cols = dict(
            s=_frozen(s, np.float64),
            a=_frozen(a, np.float64),
            r=_frozen(np.asarray(self.r, dtype=np.float64).reshape(n), np.float64),
            s2=_frozen(s2, np.float64),
            done=_frozen(np.asarray(self.done).reshape(n), bool),
            traj=_frozen(np.asarray(self.traj).reshape(n), np.int64),
            t=_frozen(np.asarray(self.t).reshape(n), np.int64),
        )
        for k, v in cols.items():
            object.__setattr__(self, k, v)
        if s2.shape != s.shape or a.shape[0] != n:
            raise ValueError("dimension mismatch between s, a and s2")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        for k in ("s", "a", "r", "s2"):
            if not np.all(np.isfinite(cols[k])):
                raise ValueError(f"non-finite values in column {k!r}")
        if np.any(cols["traj"] < 0) or np.any(cols["t"] < 0):
            raise ValueError("traj ids and steps must be non-negative")
        self._check_trajectories()

    def _check_trajectories(self):
        if len(self) < 2:
            return
        order = np.lexsort((self.t, self.traj))
        tr, st = self.traj[order], self.t[order]
        same = tr[1:] == tr[:-1]
        if np.any(same & (st[1:] <= st[:-1])):
            raise ValueError("steps within a trajectory must be strictly increasing")
        consecutive = same & (st[1:] == st[:-1] + 1)
        if np.any(consecutive):
            prev_next = self.s2[order[:-1][consecutive]]
            cur = self.s[order[1:][consecutive]]
            if not np.array_equal(prev_next, cur):
                raise ValueError("s_next of step t differs from s of step t+1")

    def __len__(self):
        return int(self.s.shape[0])

    @property
    def count(self):
        return len(self)

    @property
    def obs_dim(self):
        return int(self.s.shape[1])

    @property
    def act_dim(self):
        return int(self.a.shape[1])

    def __getitem__(self, i) -> Transition:
        return Transition(self.s[i], self.a[i], float(self.r[i]), self.s2[i],
                          bool(self.done[i]), int(self.traj[i]), int(self.t[i]))

    def __eq__(self, other):
        if not isinstance(other, TransitionDataset):
            return NotImplemented
        return (self.header() == other.header() and self.provenance == other.provenance
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("s", "a", "r", "s2", "done", "traj", "t")))

    def header(self):
        return {"version": FORMAT_VERSION, "obs_dim": self.obs_dim, "act_dim": self.act_dim,
                "count": self.count, "discount": self.discount, "name": self.name}

    def content_hash(self):
        h = hashlib.sha256()
        for k in ("s", "a", "r", "s2", "done", "traj", "t"):
            h.update(np.ascontiguousarray(getattr(self, k)).tobytes())
        h.update(json.dumps(self.header(), sort_keys=True).encode())
        return h.hexdigest()

    def subset(self, idx, provenance=None):
        idx = np.asarray(idx)
        return TransitionDataset(self.s[idx], self.a[idx], self.r[idx], self.s2[idx],
                                 self.done[idx], self.traj[idx], self.t[idx],
                                 discount=self.discount, name=self.name,
                                 provenance=self.provenance if provenance is None else provenance)

    def with_rewards(self, r, provenance=None):
        return replace(self, r=np.asarray(r, dtype=np.float64),
                       provenance=self.provenance if provenance is None else provenance)

    def trajectory_returns(self):
        """Undiscounted return per trajectory id, as ``{traj_id: return}``."""
        ids, inv = np.unique(self.traj, return_inverse=True)
        sums = np.bincount(inv, weights=self.r, minlength=len(ids))
        return dict(zip(ids.tolist(), sums.tolist()))

    @staticmethod
    def concatenate(parts, name=None, provenance=""):
        parts = list(parts)
        cat = lambda k: np.concatenate([getattr(p, k) for p in parts])
        return TransitionDataset(cat("s"), cat("a"), cat("r"), cat("s2"), cat("done"),
                                 cat("traj"), cat("t"), discount=parts[0].discount,
                                 name=name or parts[0].name, provenance=provenance)


# ---------------------------------------------------------------------------
# Tabular MDPs


@dataclass(frozen=True, eq=False)
class TabularMDP:
    P: np.ndarray  # (S, A, S)
    R: np.ndarray  # (S, A)
    d0: np.ndarray  # (S,)
    gamma: float

    def __post_init__(self):
        P = _frozen(self.P, np.float64)
        R = _frozen(self.R, np.float64)
        d0 = _frozen(self.d0, np.float64)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "d0", d0)
        S, A = R.shape
        if P.shape != (S, A, S) or d0.shape != (S,):
            raise ValueError(f"inconsistent shapes P{P.shape} R{R.shape} d0{d0.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be non-negative and sum to 1")
        if np.any(d0 < 0) or abs(d0.sum() - 1.0) > 1e-12:
            raise ValueError("d0 must be a probability vector")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def n_states(self):
        return self.R.shape[0]

    @property
    def n_actions(self):
        return self.R.shape[1]


def sample_tabular_dataset(mdp: TabularMDP, dD, n, seed, name="tabular"):
    """Draw ``n`` i.i.d. transitions with ``(s, a) ~ dD`` and ``s' ~ P``.

    Observations are the state index and actions the action index, each
    stored as a length-1 vector. Every transition is its own trajectory.
    """
    rng = np.random.default_rng(seed)
    dD = np.asarray(dD, dtype=np.float64)
    flat = dD.ravel() / dD.sum()
    S, A = mdp.n_states, mdp.n_actions
    sa = rng.choice(S * A, size=n, p=flat)
    s, a = np.divmod(sa, A)
    u = rng.random(n)
    cdf = np.cumsum(mdp.P[s, a], axis=1)
    s2 = np.minimum((u[:, None] > cdf).sum(axis=1), S - 1)
    return TransitionDataset(s.astype(float), a.astype(float), mdp.R[s, a], s2.astype(float),
                             np.zeros(n, bool), np.arange(n), np.zeros(n, int),
                             discount=mdp.gamma, name=name,
                             provenance=f"iid visitation sample n={n} seed={seed}")


def expected_tabular_dataset(mdp: TabularMDP, dD, name="tabular-expected"):
    """Enumerate every ``(s, a, s')`` with positive mass under ``dD x P``.

    Returns the dataset and the matching probability weight per row, for
    exact full-batch training on an expectation rather than a sample.
    """
    dD = np.asarray(dD, dtype=np.float64)
    mass = dD[:, :, None] * mdp.P
    s, a, s2 = np.nonzero(mass > 0)
    w = mass[s, a, s2]
    n = len(s)
    ds = TransitionDataset(s.astype(float), a.astype(float), mdp.R[s, a], s2.astype(float),
                           np.zeros(n, bool), np.arange(n), np.zeros(n, int),
                           discount=mdp.gamma, name=name, provenance="expected transitions")
    return ds, w / w.sum()


class IndexDiscretizer:
    """Maps index-valued observations/actions (tabular datasets) to ints."""

    def __init__(self, n_states, n_actions):
        self.n_states = n_states
        self.n_actions = n_actions

    def state_index(self, obs):
        return np.asarray(obs, dtype=np.float64).reshape(len(obs), -1)[:, 0].round().astype(np.int64)

    def action_index(self, act):
        return np.asarray(act, dtype=np.float64).reshape(len(act), -1)[:, 0].round().astype(np.int64)


def empirical_visitation(ds: TransitionDataset, disc, weights=None):
    """Normalized ``(state, action)`` histogram of the dataset sources."""
    si, ai = disc.state_index(ds.s), disc.action_index(ds.a)
    flat = np.bincount(si * disc.n_actions + ai, weights=weights,
                       minlength=disc.n_states * disc.n_actions).astype(float)
    return (flat / flat.sum()).reshape(disc.n_states, disc.n_actions)


# ---------------------------------------------------------------------------
# Gridworld toycase

# up, down, left, right as (dx, dy)
ACTION_VECTORS = np.array([[0.0, 1.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 0.0]])


@dataclass(frozen=True)
class GridworldSpec:
    width: int = 5
    height: int = 5
    start: tuple = (0, 0)
    goal: tuple = (4, 4)
    blocked: tuple = ()
    step_reward: float = 0.0
    goal_reward: float = 1.0
    noise: float = 0.1
    max_steps: int = 50
    gamma: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(self.start))
        object.__setattr__(self, "goal", tuple(self.goal))
        object.__setattr__(self, "blocked", tuple(tuple(b) for b in self.blocked))
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must have positive size")
        if self.start == self.goal:
            raise ValueError("start and goal must differ")
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not self.inside(cell) or cell in self.blocked:
                raise ValueError(f"{name} cell {cell} is outside the grid or blocked")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def inside(self, cell):
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def free(self, cell):
        return self.inside(cell) and cell not in self.blocked

    def to_dict(self):
        d = dict(self.__dict__)
        d["start"], d["goal"] = list(self.start), list(self.goal)
        d["blocked"] = [list(b) for b in self.blocked]
        return d


class GridworldError(ValueError):
    pass


def dominant_direction(action):
    """Index into ``ACTION_VECTORS`` of the dominant axis of a 2-D action, or -1."""
    ax, ay = float(action[0]), float(action[1])
    if ax == 0.0 and ay == 0.0:
        return -1
    if abs(ax) >= abs(ay):
        return 3 if ax > 0 else 2
    return 0 if ay > 0 else 1


class GridworldEnv:
    """Continuous-state gridworld with cell-structured dynamics.

    Observations are cell centers ``(x + 0.5, y + 0.5)`` plus uniform noise
    in ``[-noise, noise]`` per axis. An action moves one cell along its
    dominant axis; moves into walls or blocked cells leave the agent in
    place. Entering the goal pays ``goal_reward`` and terminates.
    """

    def __init__(self, spec: GridworldSpec):
        self.spec = spec
        self.cells = [(x, y) for y in range(spec.height) for x in range(spec.width)
                      if (x, y) not in spec.blocked]
        self.index = {c: i for i, c in enumerate(self.cells)}
        # blocked cells map to state 0; observations never fall inside them
        self._lookup = np.zeros((spec.width, spec.height), dtype=np.int64)
        for (x, y), i in self.index.items():
            self._lookup[x, y] = i
        self.n_states = len(self.cells)
        self.n_actions = len(ACTION_VECTORS)
        self.obs_dim = 2
        self.act_dim = 2
        self._rng = np.random.default_rng(0)
        self.cell = spec.start
        self.steps = 0

    def move(self, cell, direction):
        if direction < 0:
            return cell
        dx, dy = ACTION_VECTORS[direction].astype(int)
        nxt = (cell[0] + dx, cell[1] + dy)
        return nxt if self.spec.free(nxt) else cell

    def observe(self, cell):
        center = np.array([cell[0] + 0.5, cell[1] + 0.5])
        if self.spec.noise > 0:
            center = center + self._rng.uniform(-self.spec.noise, self.spec.noise, size=2)
        return center

    def reset(self, seed=None):
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.cell = self.spec.start
        self.steps = 0
        return self.observe(self.cell)

    def step(self, action):
        """Returns ``(obs, reward, done, truncated)``."""
        self.cell = self.move(self.cell, dominant_direction(action))
        self.steps += 1
        done = self.cell == self.spec.goal
        reward = self.spec.goal_reward if done else self.spec.step_reward
        truncated = (not done) and self.steps >= self.spec.max_steps
        return self.observe(self.cell), reward, done, truncated

    # discretizer interface used by tabular heads
    def state_index(self, obs):
        obs = np.asarray(obs, dtype=np.float64).reshape(-1, 2)
        xy = np.floor(obs).astype(np.int64)
        xy[:, 0] = np.clip(xy[:, 0], 0, self.spec.width - 1)
        xy[:, 1] = np.clip(xy[:, 1], 0, self.spec.height - 1)
        return self._lookup[xy[:, 0], xy[:, 1]]

    def action_index(self, act):
        act = np.asarray(act, dtype=np.float64).reshape(-1, 2)
        out = np.where(np.abs(act[:, 0]) >= np.abs(act[:, 1]),
                       np.where(act[:, 0] > 0, 3, 2), np.where(act[:, 1] > 0, 0, 1))
        return out.astype(np.int64)


def shortest_path_length(spec: GridworldSpec):
    """Breadth-first distance from start to goal, or None when unreachable."""
    env = GridworldEnv(spec)
    dist = {spec.start: 0}
    queue = deque([spec.start])
    while queue:
        c = queue.popleft()
        if c == spec.goal:
            return dist[c]
        for d in range(len(ACTION_VECTORS)):
            n = env.move(c, d)
            if n not in dist:
                dist[n] = dist[c] + 1
                queue.append(n)
    return None


def make_gridworld(spec: GridworldSpec = GridworldSpec()):
    """Build the continuous environment and the tabular MDP of its cell skeleton.

    In the tabular MDP the goal is absorbing with zero reward, which gives the
    same values as terminating on arrival.
    """
    if shortest_path_length(spec) is None:
        raise GridworldError(f"goal {spec.goal} unreachable from start {spec.start}")
    env = GridworldEnv(spec)
    S, A = env.n_states, env.n_actions
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    g = env.index[spec.goal]
    for i, c in enumerate(env.cells):
        for a in range(A):
            if i == g:
                P[i, a, g] = 1.0
                continue
            n = env.move(c, a)
            j = env.index[n]
            P[i, a, j] = 1.0
            R[i, a] = spec.goal_reward if j == g else spec.step_reward
    d0 = np.zeros(S)
    d0[env.index[spec.start]] = 1.0
    return env, TabularMDP(P, R, d0, spec.gamma)


def collect(env: GridworldEnv, act_fn, n, seed, name="gridworld"):
    """Roll out ``act_fn(obs, rng) -> action`` for exactly ``n`` transitions.

    Episodes reset at the goal or at the step limit.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    env_seed, act_seed = rng.integers(0, 2**63 - 1, size=2)
    act_rng = np.random.default_rng(act_seed)
    cols = {k: [] for k in ("s", "a", "r", "s2", "done", "traj", "t")}
    obs = env.reset(int(env_seed))
    traj, t = 0, 0
    for _ in range(n):
        action = np.asarray(act_fn(obs, act_rng), dtype=np.float64)
        nxt, r, done, trunc = env.step(action)
        for k, v in zip(cols, (obs, action, r, nxt, done, traj, t)):
            cols[k].append(v)
        obs, t = nxt, t + 1
        if done or trunc:
            obs = env.reset()
            traj, t = traj + 1, 0
    return TransitionDataset(np.array(cols["s"]), np.array(cols["a"]), cols["r"],
                             np.array(cols["s2"]), cols["done"], cols["traj"], cols["t"],
                             discount=env.spec.gamma, name=name,
                             provenance=f"collect n={n} seed={seed}")


def random_action(obs, rng):
    return ACTION_VECTORS[rng.integers(len(ACTION_VECTORS))]


def collect_random(env: GridworldEnv, n, seed):
    """Uniform random 4-direction behavior policy."""
    ds = collect(env, random_action, n, seed, name="random")
    return replace(ds, provenance=f"random behavior n={n} seed={seed}")


def tabular_policy_actor(env: GridworldEnv, policy):
    """Wrap an ``(S, A)`` policy table as an actor on continuous observations."""
    policy = np.asarray(policy, dtype=np.float64)

    def act(obs, rng):
        s = env.state_index(obs[None])[0]
        return ACTION_VECTORS[rng.choice(env.n_actions, p=policy[s])]

    return act


def collect_policy(env: GridworldEnv, policy, n, seed, name="expert"):
    ds = collect(env, tabular_policy_actor(env, policy), n, seed, name=name)
    return replace(ds, provenance=f"{name} tabular policy n={n} seed={seed}")


class InsufficientDataError(ValueError):
    pass


def _take_trajectories(ds: TransitionDataset, k, rng):
    """Indices of whole trajectories, in random order, totalling exactly ``k`` rows.

    The last trajectory taken is cut to its leading steps when needed.
    """
    ids = np.unique(ds.traj)
    rng.shuffle(ids)
    chosen = []
    remaining = k
    for tid in ids:
        if remaining == 0:
            break
        rows = np.nonzero(ds.traj == tid)[0]
        rows = rows[np.argsort(ds.t[rows], kind="stable")][:remaining]
        chosen.append(rows)
        remaining -= len(rows)
    return chosen


def mix_datasets(expert: TransitionDataset, random: TransitionDataset, expert_ratio, total, seed):
    """Mix ``floor(expert_ratio * total)`` expert rows with random rows.

    Trajectories stay contiguous and receive fresh ids; the trajectory order
    is shuffled by ``seed``.
    """
    if not 0.0 < expert_ratio < 1.0:
        raise ValueError("expert_ratio must lie in (0, 1)")
    n_exp = int(np.floor(expert_ratio * total + 1e-9))
    n_rand = total - n_exp
    if len(expert) < n_exp:
        raise InsufficientDataError(f"expert source has {len(expert)} transitions, need {n_exp}")
    if len(random) < n_rand:
        raise InsufficientDataError(f"random source has {len(random)} transitions, need {n_rand}")
    rng = np.random.default_rng(seed)
    pieces = [(expert, rows) for rows in _take_trajectories(expert, n_exp, rng)]
    pieces += [(random, rows) for rows in _take_trajectories(random, n_rand, rng)]
    order = rng.permutation(len(pieces))
    parts = []
    for new_id, p in enumerate(order):
        src, rows = pieces[p]
        sub = src.subset(rows)
        parts.append(replace(sub, traj=np.full(len(rows), new_id)))
    out = TransitionDataset.concatenate(
        parts, name=f"mix-{expert_ratio:g}",
        provenance=f"mix expert={n_exp} random={n_rand} seed={seed}")
    return replace(out, discount=expert.discount)


def normalize_rewards(ds: TransitionDataset, mode="none", c=0.0):
    """``none``, ``range`` (divide by max - min trajectory return) or ``shift`` (r - c)."""
    if mode == "none":
        return ds
    if mode == "shift":
        return ds.with_rewards(ds.r - c, provenance=f"{ds.provenance}; shift({c:g})")
    if mode == "range":
        rets = np.array(list(ds.trajectory_returns().values()))
        span = rets.max() - rets.min() if len(rets) >= 2 else 0.0
        if span <= 0:
            raise ValueError("range standardization needs trajectories with distinct returns")
        return ds.with_rewards(ds.r / span, provenance=f"{ds.provenance}; range({span:g})")
    raise ValueError(f"unknown reward normalization {mode!r}")


# ---------------------------------------------------------------------------
# File format


def _dump(obj):
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def save_dataset(ds: TransitionDataset, path):
    path = Path(path)
    lines = [_dump(ds.header() | {"provenance": ds.provenance})]
    for i in range(len(ds)):
        lines.append(_dump({"s": ds.s[i].tolist(), "a": ds.a[i].tolist(), "r": float(ds.r[i]),
                            "s2": ds.s2[i].tolist(), "done": int(ds.done[i]),
                            "traj": int(ds.traj[i]), "t": int(ds.t[i])}))
    path.write_text("\n".join(lines) + "\n")


def _vec(rec, key, dim, line):
    v = rec.get(key)
    if not isinstance(v, list) or len(v) != dim:
        raise DatasetFormatError(line, f"row field {key!r} must be a list of length {dim}")
    arr = np.array(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DatasetFormatError(line, f"non-finite value in {key!r}")
    return arr


def load_dataset(path):
    path = Path(path)
    with path.open() as fh:
        raw = [ln for ln in fh.read().split("\n")]
    while raw and raw[-1] == "":
        raw.pop()
    if not raw:
        raise DatasetFormatError(1, "empty file")
    try:
        head = json.loads(raw[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(1, f"malformed header: {exc}") from None
    for k in ("version", "obs_dim", "act_dim", "count", "discount", "name"):
        if k not in head:
            raise DatasetFormatError(1, f"header missing {k!r}")
    if head["version"] != FORMAT_VERSION:
        raise DatasetFormatError(1, f"unsupported version {head['version']}")
    D, A, N = int(head["obs_dim"]), int(head["act_dim"]), int(head["count"])
    body = raw[1:]
    if len(body) != N:
        raise DatasetFormatError(len(raw), f"header count {N} but {len(body)} rows")
    s = np.zeros((N, D)); a = np.zeros((N, A)); s2 = np.zeros((N, D))
    r = np.zeros(N); done = np.zeros(N, bool); traj = np.zeros(N, np.int64); t = np.zeros(N, np.int64)
    for i, ln in enumerate(body):
        line = i + 2
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(line, f"malformed row: {exc}") from None
        s[i] = _vec(rec, "s", D, line)
        a[i] = _vec(rec, "a", A, line)
        s2[i] = _vec(rec, "s2", D, line)
        try:
            r[i] = float(rec["r"])
            done[i] = bool(int(rec["done"]))
            traj[i] = int(rec["traj"])
            t[i] = int(rec["t"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(line, f"bad scalar field: {exc}") from None
        if not np.isfinite(r[i]):
            raise DatasetFormatError(line, "non-finite reward")
    try:
        return TransitionDataset(s, a, r, s2, done, traj, t, discount=float(head["discount"]),
                                 name=str(head["name"]), provenance=str(head.get("provenance", "")))
    except ValueError as exc:
        raise DatasetFormatError(1, str(exc)) from None
