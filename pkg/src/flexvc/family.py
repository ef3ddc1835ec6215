"""Link and variance families and the quasi-likelihood derivatives.

``Q(mu, y)`` satisfies ``dQ/dmu = (y - mu) / V(mu)``; ``q_derivs`` returns the
first two derivatives of ``u -> Q(g^-1(u), y)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, xlogy


class FamilyDomainError(ValueError):
    pass


@dataclass(frozen=True)
class QLFamily:
    """Base class; subclasses provide closed forms."""

    name: str = ""
    u_max: float = np.inf

    def clamp(self, u):
        return np.clip(u, -self.u_max, self.u_max)

    def check_response(self, y):
        pass

    def link_eval(self, which: str, arg):
        funcs = {"g": self.g, "g_inv": self.g_inv, "g1": self.g1, "g2": self.g2,
                 "V": self.V, "V1": self.V1}
        if which not in funcs:
            raise ValueError(f"unknown function {which!r}; expected one of {sorted(funcs)}")
        return funcs[which](arg)


@dataclass(frozen=True)
class IdentityGaussian(QLFamily):
    name: str = "identity"

    def g(self, mu):
        return np.asarray(mu, dtype=float)

    def g_inv(self, u):
        return np.asarray(u, dtype=float)

    def g1(self, mu):
        return np.ones_like(np.asarray(mu, dtype=float))

    def g2(self, mu):
        return np.zeros_like(np.asarray(mu, dtype=float))

    def V(self, mu):
        return np.ones_like(np.asarray(mu, dtype=float))

    def V1(self, mu):
        return np.zeros_like(np.asarray(mu, dtype=float))

    def Q(self, mu, y):
        return -0.5 * (np.asarray(y) - mu) ** 2

    def q_derivs(self, u, y):
        u = np.asarray(u, dtype=float)
        q1 = y - u
        return q1, np.full(np.shape(q1), -1.0)


@dataclass(frozen=True)
class LogitBinomial(QLFamily):
    name: str = "logit"
    u_max: float = 30.0

    def check_response(self, y):
        y = np.asarray(y)
        if np.any((y < 0) | (y > 1)):
            raise FamilyDomainError("binomial responses must lie in [0, 1]")

    def g(self, mu):
        mu = np.asarray(mu, dtype=float)
        if np.any((mu <= 0) | (mu >= 1)):
            raise FamilyDomainError("logit link needs mu in (0, 1)")
        return np.log(mu) - np.log1p(-mu)

    def g_inv(self, u):
        return expit(np.asarray(u, dtype=float))

    def g1(self, mu):
        mu = np.asarray(mu, dtype=float)
        return 1.0 / (mu * (1.0 - mu))

    def g2(self, mu):
        mu = np.asarray(mu, dtype=float)
        return (2.0 * mu - 1.0) / (mu * (1.0 - mu)) ** 2

    def V(self, mu):
        mu = np.asarray(mu, dtype=float)
        return mu * (1.0 - mu)

    def V1(self, mu):
        return 1.0 - 2.0 * np.asarray(mu, dtype=float)

    def Q(self, mu, y):
        y = np.asarray(y, dtype=float)
        return xlogy(y, mu) + xlogy(1.0 - y, 1.0 - mu)

    def q_derivs(self, u, y):
        mu = expit(self.clamp(np.asarray(u, dtype=float)))
        return y - mu, -mu * (1.0 - mu)


FAMILIES = {"identity": IdentityGaussian, "logit": LogitBinomial}


def get_family(link: str) -> QLFamily:
    try:
        return FAMILIES[link]()
    except KeyError:
        raise ValueError(f"unknown link {link!r}; expected one of {sorted(FAMILIES)}") from None


def q_derivs(family: QLFamily, u, y):
    """``(Q1, Q2)`` at linear predictor ``u`` (clamped) and response ``y``."""
    family.check_response(y)
    q1, q2 = family.q_derivs(u, y)
    if np.any(~np.isfinite(q1)) or np.any(~np.isfinite(q2)):
        raise FloatingPointError("non-finite quasi-likelihood derivative")
    return q1, q2


def link_eval(family: QLFamily, which: str, arg):
    return family.link_eval(which, arg)
