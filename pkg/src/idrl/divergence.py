"""Convex generator f, its non-negativity constrained conjugate and the two
ways of weighting the conjugate term against the value term.

Only the Pearson chi-squared generator is shipped. Other generators can be
added by subclassing :class:`Generator`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Raised when a divergence function receives a non-finite argument."""


def _finite(x):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"non-finite argument: {x!r}")
    return arr


def _out(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


class Generator:
    """Interface for a convex generator f with invertible derivative."""

    name = "abstract"

    def f(self, x):
        raise NotImplementedError

    def f_prime(self, x):
        raise NotImplementedError

    def f_prime_inv(self, y):
        raise NotImplementedError

    def f_p_star(self, y):
        # max(0, (f')^-1(y)) * y - f(max(0, (f')^-1(y)))
        x = np.maximum(0.0, self.f_prime_inv(y))
        return x * y - self.f(x)

    def f_p_star_prime(self, y):
        return np.maximum(0.0, self.f_prime_inv(y))


class ChiSquared(Generator):
    name = "chi2"

    def f(self, x):
        return (x - 1.0) ** 2

    def f_prime(self, x):
        return 2.0 * (x - 1.0)

    def f_prime_inv(self, y):
        return y / 2.0 + 1.0

    def f_p_star(self, y):
        # y(y/4 + 1) above the kink at y = -2, constant -f(0) = -1 below it
        return np.where(y >= -2.0, y * (y / 4.0 + 1.0), -1.0)


GENERATORS = {"chi2": ChiSquared()}


def f_value(x, kind="chi2"):
    arr = _finite(x)
    return _out(GENERATORS[kind].f(arr), x)


def f_prime(x, kind="chi2"):
    arr = _finite(x)
    return _out(GENERATORS[kind].f_prime(arr), x)


def f_prime_inv(y, kind="chi2"):
    arr = _finite(y)
    return _out(GENERATORS[kind].f_prime_inv(arr), y)


def f_p_star(y, kind="chi2"):
    arr = _finite(y)
    return _out(GENERATORS[kind].f_p_star(arr), y)


def f_p_star_prime(y, kind="chi2"):
    """Right derivative of ``f_p_star``; at the kink this is the upper branch."""
    arr = _finite(y)
    return _out(GENERATORS[kind].f_p_star_prime(arr), y)


@dataclass(frozen=True)
class DivergenceSpec:
    """Generator choice plus regularization strength.

    ``mode="lambda"`` weights the value term by ``1 - lam`` and the conjugate
    term by ``lam`` with an unscaled conjugate argument. ``mode="alpha"``
    weights the conjugate by ``alpha`` and scales its argument by ``1/alpha``.
    """

    kind: str = "chi2"
    alpha: float = 1.0
    lam: float = 0.6
    mode: str = "lambda"

    def __post_init__(self):
        if self.kind not in GENERATORS:
            raise ValueError(f"unknown divergence kind {self.kind!r}")
        if self.mode not in ("lambda", "alpha"):
            raise ValueError(f"mode must be 'lambda' or 'alpha', got {self.mode!r}")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"lam must lie in (0, 1), got {self.lam}")

    @property
    def gen(self) -> Generator:
        return GENERATORS[self.kind]

    @property
    def scale(self) -> float:
        """Divisor applied to a residual before it enters the conjugate."""
        return self.alpha if self.mode == "alpha" else 1.0

    @property
    def weights(self) -> tuple[float, float]:
        """Coefficients (value term, conjugate term) of the blended objective."""
        if self.mode == "alpha":
            return 1.0, self.alpha
        return 1.0 - self.lam, self.lam

    @property
    def target_mass(self) -> float:
        """Stationary value of E_mu[w(a|s)] implied by the blend.

        Setting the V-derivative of the blended objective to zero gives
        ``c_v = c_conj / scale * E[w]``.
        """
        c_v, c_conj = self.weights
        return c_v * self.scale / c_conj

    def conj(self, residual, scaled=True):
        """Conjugate term evaluated at ``residual / scale`` (or unscaled)."""
        y = _finite(residual)
        if scaled:
            y = y / self.scale
        return _out(self.gen.f_p_star(y), residual)

    def ratio(self, residual, scaled=True):
        """``max(0, (f')^-1(residual / scale))``, the weight induced by a residual."""
        y = _finite(residual)
        if scaled:
            y = y / self.scale
        return _out(self.gen.f_p_star_prime(y), residual)


def blend_v_terms(v, conj, spec: DivergenceSpec):
    """Combine the value term and an already evaluated conjugate term.

    For the alpha form ``conj`` must have been computed at the residual
    scaled by ``1/alpha``.
    """
    v_arr, c_arr = _finite(v), _finite(conj)
    c_v, c_conj = spec.weights
    return _out(c_v * v_arr + c_conj * c_arr, v)
