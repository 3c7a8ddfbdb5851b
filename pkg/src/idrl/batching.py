"""Minibatch views over a :class:`~idrl.data.TransitionDataset`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from idrl.data import TransitionDataset


class DivergenceError(RuntimeError):
    """Training produced values beyond the configured bound."""


class NonFiniteLoss(FloatingPointError):
    def __init__(self, name, index):
        super().__init__(f"non-finite {name} at batch index {index}")
        self.index = index


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    gamma: float
    p: np.ndarray  # averaging weights, sum to 1
    idx: np.ndarray | None = None

    @property
    def sa(self):
        return np.hstack([self.s, self.a])

    @property
    def not_done(self):
        return 1.0 - self.done.astype(np.float64)

    def mean(self, values, name="loss"):
        values = np.asarray(values, dtype=np.float64)
        bad = np.nonzero(~np.isfinite(values))[0]
        if bad.size:
            raise NonFiniteLoss(name, int(bad[0]))
        return float(np.dot(self.p, values))


def make_batch(ds: TransitionDataset, idx=None, p=None):
    if idx is None:
        idx = np.arange(len(ds))
    n = len(idx)
    p = np.full(n, 1.0 / n) if p is None else np.asarray(p, dtype=np.float64) / np.sum(p)
    return Batch(ds.s[idx], ds.a[idx], ds.r[idx], ds.s2[idx], ds.done[idx], ds.discount, p, idx)


class Sampler:
    """Draws minibatches with replacement, or yields the full dataset.

    With ``batch_size=None`` every call returns the whole dataset averaged by
    ``sample_weight`` (uniform when omitted). Otherwise indices are drawn in
    proportion to ``sample_weight``.
    """

    def __init__(self, ds: TransitionDataset, batch_size, rng, sample_weight=None):
        if len(ds) == 0:
            raise ValueError("cannot sample from an empty dataset")
        self.ds = ds
        self.batch_size = batch_size
        self.rng = rng
        self.weight = None if sample_weight is None else np.asarray(sample_weight, np.float64)
        if batch_size is None:
            self._full = make_batch(ds, p=self.weight)
        elif self.weight is not None:
            self._cdf = np.cumsum(self.weight / self.weight.sum())

    def __call__(self):
        if self.batch_size is None:
            return self._full
        if self.weight is None:
            idx = self.rng.integers(0, len(self.ds), size=self.batch_size)
        else:
            idx = np.minimum(np.searchsorted(self._cdf, self.rng.random(self.batch_size), side="right"),
                             len(self.ds) - 1)
        return make_batch(self.ds, idx)
