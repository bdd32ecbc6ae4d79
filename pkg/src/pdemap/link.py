"""Reparametrization of the constrained coefficient class.

A link function maps the linear space of zero-trace fields onto the set of
admissible PDE coefficients {f > f_min} via pointwise composition.  The
concrete map used here is softplus-based,

    Psi(x) = 1 + (1 - f_min) * (softplus(x + b) - softplus(b)) / softplus(b),

which is a smooth strictly increasing bijection of R onto (f_min, inf)
with Psi(0) = 1 exactly, has all derivatives bounded, and admits a closed
form inverse and derivative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fnspace import GridFunction

__all__ = ["LinkFunction", "link_apply", "link_inverse", "link_deriv"]


def _softplus(t):
    return np.logaddexp(0.0, t)


def _softplus_inverse(y):
    """Inverse of softplus on (0, inf), stable at both ends."""
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    big = y > 30.0
    # large y: log(e^y - 1) = y + log1p(-e^-y)
    out[big] = y[big] + np.log1p(-np.exp(-y[big]))
    out[~big] = np.log(np.expm1(y[~big]))
    return out


@dataclass(frozen=True)
class LinkFunction:
    """Softplus link onto (f_min, inf), anchored at Psi(0) = 1.

    ``f_min`` is the lower coefficient bound (0 < f_min < 1 so that the
    anchor lies in the range); ``b`` is a positive shape parameter.
    """

    f_min: float = 0.5
    b: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.f_min < 1.0:
            raise ValueError(f"f_min must lie in (0, 1), got {self.f_min}")
        if self.b <= 0.0:
            raise ValueError(f"b must be positive, got {self.b}")

    @property
    def _scale(self) -> float:
        return (1.0 - self.f_min) / float(_softplus(self.b))

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return 1.0 + self._scale * (_softplus(x + self.b) - _softplus(self.b))

    def derivative(self, x):
        from scipy.special import expit

        x = np.asarray(x, dtype=float)
        return self._scale * expit(x + self.b)

    def inverse_value(self, f):
        f = np.asarray(f, dtype=float)
        if np.any(f <= self.f_min):
            raise ValueError(f"values must exceed f_min = {self.f_min}")
        t = (f - self.f_min) / self._scale
        return _softplus_inverse(t) - self.b

    @property
    def sup_derivative(self) -> float:
        """Analytic bound sup_x Psi'(x) = (1 - f_min)/softplus(b)."""
        return self._scale


def link_apply(link: LinkFunction, theta: GridFunction) -> GridFunction:
    """Pointwise f = Psi(theta); zero-trace theta maps the boundary to 1."""
    return GridFunction(theta.grid, link.value(theta.values))


def link_inverse(link: LinkFunction, f: GridFunction) -> GridFunction:
    """Pointwise Psi^{-1}(f); requires f > f_min everywhere."""
    return GridFunction(f.grid, link.inverse_value(f.values))


def link_deriv(link: LinkFunction, theta: GridFunction) -> GridFunction:
    """Pointwise Psi'(theta) > 0 (chain-rule factor for gradients)."""
    return GridFunction(theta.grid, link.derivative(theta.values))
