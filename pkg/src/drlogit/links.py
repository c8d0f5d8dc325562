"""Monotone link functions ``g`` with derivative ``g'`` and antiderivative ``G``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

from .core import EXP_CAP, ValidationError


def _exp(u):
    return np.exp(np.clip(u, -EXP_CAP, EXP_CAP))


def _softplus(u):
    u = np.asarray(u, dtype=float)
    return np.logaddexp(0.0, u)


def _expit_deriv(u):
    s = expit(u)
    return s * (1.0 - s)


@dataclass(frozen=True)
class LinkFunction:
    """A conditional-mean link with ``G' = g`` and ``g' > 0``.

    ``G`` makes ``sum c_i {G(x_i'a) - A_i x_i'a}`` a convex objective whose
    stationarity condition is the moment equation ``sum c_i {A_i - g(x_i'a)} x_i = 0``.
    """

    kind: str
    g: Callable
    deriv: Callable
    antideriv: Callable

    def __call__(self, u):
        return self.g(u)


IDENTITY = LinkFunction("identity", lambda u: np.asarray(u, dtype=float),
                        lambda u: np.ones_like(np.asarray(u, dtype=float)),
                        lambda u: 0.5 * np.asarray(u, dtype=float) ** 2)
LOGISTIC = LinkFunction("logistic_expit", expit, _expit_deriv, _softplus)
EXPONENTIAL = LinkFunction("exponential", _exp, _exp, _exp)

_BY_NAME = {
    "identity": IDENTITY,
    "logistic_expit": LOGISTIC,
    "expit": LOGISTIC,
    "logistic": LOGISTIC,
    "exponential": EXPONENTIAL,
    "exp": EXPONENTIAL,
}


def get_link(link) -> LinkFunction:
    if isinstance(link, LinkFunction):
        return link
    try:
        return _BY_NAME[str(link)]
    except KeyError:
        raise ValidationError(f"unknown link {link!r}; expected one of "
                              "identity, expit, exp") from None
