"""Function approximators with hand-written reverse mode.

Every head maps a batch of inputs ``X`` to outputs and can pull back an
upstream gradient ``dout`` (same shape as the outputs) to parameter
gradients. Losses in this package are written as explicit functions of head
outputs, so the chain rule stops at ``dout``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


class TabularHead:
    """Dense table over enumerated inputs.

    ``key`` turns a batch of raw inputs into integer entries; by default the
    first column of ``X`` is rounded to an index.
    """

    backend = "tabular"

    def __init__(self, n_entries, key=None, init=0.0):
        self.table = np.full(int(n_entries), float(init))
        self.key = key

    @property
    def params(self):
        return [self.table]

    def index(self, X):
        if self.key is not None:
            idx = np.asarray(self.key(X), dtype=np.int64)
        else:
            X = np.asarray(X, dtype=np.float64)
            idx = (X.reshape(len(X), -1)[:, 0] if X.ndim else X).round().astype(np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self.table)):
            raise ShapeError(f"table index out of range [0, {len(self.table)})")
        return idx

    def __call__(self, X):
        return self.table[self.index(X)]

    def forward(self, X):
        idx = self.index(X)
        return self.table[idx], idx

    def backward(self, cache, dout):
        return [np.bincount(cache, weights=np.asarray(dout, np.float64), minlength=len(self.table))]

    def grad(self, X, dout):
        return self.backward(self.index(X), dout)

    def per_sample_grads(self, X):
        idx = self.index(X)
        G = np.zeros((len(idx), len(self.table)))
        G[np.arange(len(idx)), idx] = 1.0
        return G


_ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
}


class MLPHead:
    """Fully connected network ``in_dim -> hidden... -> out_dim``.

    ``out_dim == 1`` heads return a flat ``(B,)`` vector. Initialization
    draws weights and biases uniformly in ``+-1/sqrt(fan_in)``.
    """

    backend = "network"

    def __init__(self, in_dim, hidden=(64, 64), out_dim=1, activation="relu", rng=None,
                 in_shift=None, in_scale=None):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.sizes = [int(in_dim), *map(int, hidden), int(out_dim)]
        self.activation = activation
        self.params = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, size=fan_out))
        # fixed input affine normalization, not trained
        self.in_shift = np.zeros(in_dim) if in_shift is None else np.asarray(in_shift, float)
        self.in_scale = np.ones(in_dim) if in_scale is None else np.asarray(in_scale, float)

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def _input(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :] if X.shape[0] == self.in_dim and self.in_dim > 1 else X[:, None]
        if X.shape[1] != self.in_dim:
            raise ShapeError(f"expected input dim {self.in_dim}, got {X.shape[1]}")
        return (X - self.in_shift) / self.in_scale

    def forward(self, X):
        act, _ = _ACTIVATIONS[self.activation]
        h = self._input(X)
        cache = [(h, None)]
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            h = act(z) if i < n_layers - 1 else z
            cache.append((h, z))
        out = h[:, 0] if self.out_dim == 1 else h
        return out, cache

    def __call__(self, X):
        return self.forward(X)[0]

    def backward(self, cache, dout):
        _, dact = _ACTIVATIONS[self.activation]
        g = np.asarray(dout, dtype=np.float64)
        g = g[:, None] if g.ndim == 1 else g
        n_layers = len(self.params) // 2
        grads = [None] * len(self.params)
        for i in reversed(range(n_layers)):
            h_in = cache[i][0]
            if i < n_layers - 1:
                h_out, z = cache[i + 1]
                g = g * dact(z, h_out)
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.params[2 * i].T
        return grads

    def grad(self, X, dout):
        _, cache = self.forward(X)
        return self.backward(cache, dout)

    def per_sample_grads(self, X):
        """Flattened gradient of each scalar output w.r.t. all parameters, ``(B, P)``."""
        if self.out_dim != 1:
            raise ShapeError("per-sample gradients need a scalar head")
        _, dact = _ACTIVATIONS[self.activation]
        _, cache = self.forward(X)
        B = cache[0][0].shape[0]
        n_layers = len(self.params) // 2
        g = np.ones((B, 1))
        blocks = [None] * len(self.params)
        for i in reversed(range(n_layers)):
            h_in = cache[i][0]
            if i < n_layers - 1:
                h_out, z = cache[i + 1]
                g = g * dact(z, h_out)
            blocks[2 * i] = (h_in[:, :, None] * g[:, None, :]).reshape(B, -1)
            blocks[2 * i + 1] = g
            if i > 0:
                g = g @ self.params[2 * i].T
        return np.concatenate(blocks, axis=1)


def flatten(arrays):
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten(vec, like):
    out, i = [], 0
    for a in like:
        out.append(np.asarray(vec[i:i + a.size]).reshape(a.shape))
        i += a.size
    return out


def get_flat(head):
    return flatten(head.params)


def set_flat(head, vec):
    for p, v in zip(head.params, unflatten(vec, head.params)):
        p[...] = v


class Adam:
    """Adaptive-moment optimizer with bias correction, updating in place."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        if len(params) != len(self.m):
            raise ShapeError("parameter list length changed")
        for p, g in zip(params, grads):
            if p.shape != np.shape(g):
                raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def scheduled_lr(base, i, steps, schedule="constant"):
    """Learning rate at tick ``i`` of ``steps``; ``linear`` decays to zero."""
    if schedule == "constant":
        return base
    if schedule == "linear":
        return base * (1.0 - i / max(steps, 1))
    raise ValueError(f"unknown schedule {schedule!r}")


class TargetCopy:
    """Shadow copy of a head tracked by Polyak averaging."""

    def __init__(self, source, tau=5e-3):
        if not 0.0 < tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        self.head = copy.deepcopy(source)
        self.tau = tau

    def __call__(self, X):
        return self.head(X)

    def soft_update(self, source):
        for p_t, p_s in zip(self.head.params, source.params):
            if p_t.shape != p_s.shape:
                raise ShapeError("target and source shapes differ")
            p_t *= 1.0 - self.tau
            p_t += self.tau * p_s


@dataclass
class BackendConfig:
    backend: str = "network"
    hidden: tuple = (64, 64)
    activation: str = "relu"

    def __post_init__(self):
        if self.backend not in ("tabular", "network"):
            raise ValueError(f"backend must be 'tabular' or 'network', got {self.backend!r}")
        self.hidden = tuple(int(h) for h in self.hidden)


def state_head(cfg: BackendConfig, obs_dim, rng, disc=None, in_shift=None, in_scale=None):
    if cfg.backend == "tabular":
        if disc is None:
            raise ValueError("tabular backend needs a discretizer")
        return TabularHead(disc.n_states, key=lambda X: disc.state_index(np.asarray(X)[:, :obs_dim]))
    return MLPHead(obs_dim, cfg.hidden, 1, cfg.activation, rng, in_shift, in_scale)


def state_action_head(cfg: BackendConfig, obs_dim, act_dim, rng, disc=None, in_shift=None, in_scale=None):
    if cfg.backend == "tabular":
        if disc is None:
            raise ValueError("tabular backend needs a discretizer")
        nA = disc.n_actions

        def key(X):
            X = np.asarray(X)
            return disc.state_index(X[:, :obs_dim]) * nA + disc.action_index(X[:, obs_dim:])

        return TabularHead(disc.n_states * nA, key=key)
    return MLPHead(obs_dim + act_dim, cfg.hidden, 1, cfg.activation, rng, in_shift, in_scale)


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line, one JSON line holding the flat parameters.


def save_checkpoint(head, path, extra=None):
    header = {"version": 1, "backend": head.backend,
              "shapes": [list(p.shape) for p in head.params]}
    if isinstance(head, MLPHead):
        header.update(sizes=head.sizes, activation=head.activation,
                      in_shift=head.in_shift.tolist(), in_scale=head.in_scale.tolist())
    if extra:
        header["extra"] = extra
    body = json.dumps(get_flat(head).tolist(), separators=(",", ":"))
    Path(path).write_text(json.dumps(header, separators=(",", ":")) + "\n" + body + "\n")


def load_checkpoint(path, key=None):
    """Returns ``(head, extra)``."""
    lines = Path(path).read_text().split("\n")
    header = json.loads(lines[0])
    flat = np.array(json.loads(lines[1]), dtype=np.float64)
    shapes = [tuple(s) for s in header["shapes"]]
    if sum(int(np.prod(s)) for s in shapes) != flat.size:
        raise ShapeError("checkpoint parameter count does not match header shapes")
    if header["backend"] == "tabular":
        head = TabularHead(shapes[0][0], key=key)
    else:
        sizes = header["sizes"]
        head = MLPHead(sizes[0], sizes[1:-1], sizes[-1], header["activation"],
                       in_shift=header["in_shift"], in_scale=header["in_scale"])
    if [p.shape for p in head.params] != shapes:
        raise ShapeError("checkpoint shapes do not match the reconstructed head")
    set_flat(head, flat)
    return head, header.get("extra", {})
