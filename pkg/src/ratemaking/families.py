"""Exponential-family distributions and link functions for GLM fitting."""
from __future__ import annotations

import numpy as np

from .specfun import log_gamma_array as log_gamma_v

EPS = 1e-10


class Link:
    name = ""

    def __call__(self, mu):
        raise NotImplementedError

    def inverse(self, eta):
        raise NotImplementedError

    def deriv(self, mu):
        """g'(mu)."""
        raise NotImplementedError

    def clamp(self, mu, eps=EPS):
        return mu

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(self.name)

    def __repr__(self):
        return f"{type(self).__name__}()"


class LogLink(Link):
    name = "log"

    def __call__(self, mu):
        return np.log(mu)

    def inverse(self, eta):
        return np.exp(np.minimum(eta, 700.0))

    def deriv(self, mu):
        return 1.0 / mu

    def clamp(self, mu, eps=EPS):
        return np.maximum(mu, eps)


class LogitLink(Link):
    name = "logit"

    def __call__(self, mu):
        return np.log(mu / (1.0 - mu))

    def inverse(self, eta):
        return 0.5 * (1.0 + np.tanh(0.5 * eta))

    def deriv(self, mu):
        return 1.0 / (mu * (1.0 - mu))

    def clamp(self, mu, eps=EPS):
        return np.clip(mu, eps, 1.0 - eps)


class IdentityLink(Link):
    name = "identity"

    def __call__(self, mu):
        return np.asarray(mu, float)

    def inverse(self, eta):
        return np.asarray(eta, float)

    def deriv(self, mu):
        return np.ones_like(mu)


LINKS = {"log": LogLink, "logit": LogitLink, "identity": IdentityLink}


def get_link(name: str) -> Link:
    try:
        return LINKS[name]()
    except KeyError:
        raise ValueError(f"unknown link {name!r}; choose from {sorted(LINKS)}") from None


def _xlogy(x, y):
    """x * log(y) with the convention 0 * log(0) = 0."""
    x = np.asarray(x, float)
    zero = x == 0
    return np.where(zero, 0.0, x * np.log(np.where(zero, 1.0, y)))


class Family:
    """Base class.

    ``fixed_dispersion`` families (poisson, bernoulli, negative binomial)
    have phi = 1; the others estimate it. ``extra_params`` counts parameters
    beyond the coefficients that enter AIC/BIC.
    """

    name = ""
    canonical = "log"
    fixed_dispersion = True
    extra_params = 0

    def variance(self, mu):
        raise NotImplementedError

    def unit_deviance(self, y, mu):
        raise NotImplementedError

    def deviance(self, y, mu, w):
        # unit deviances are nonnegative; clamp rounding noise at exact fits
        return float(np.sum(w * np.maximum(self.unit_deviance(y, mu), 0.0)))

    def loglik(self, y, mu, w, dispersion):
        raise NotImplementedError

    def start_mu(self, y):
        raise NotImplementedError

    def check_response(self, y):
        pass

    def simulate(self, rng: np.random.Generator, mu, w, dispersion):
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"name": self.name}

    def __eq__(self, other):
        return type(self) is type(other) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(self.name)

    def __repr__(self):
        return f"{type(self).__name__}()"


def _log_factorial(y):
    return log_gamma_v(np.asarray(y, float) + 1.0)


class Poisson(Family):
    name = "poisson"

    def variance(self, mu):
        return mu

    def unit_deviance(self, y, mu):
        return 2.0 * (_xlogy(y, y / mu) - (y - mu))

    def loglik(self, y, mu, w, dispersion=1.0):
        return float(np.sum(w * (_xlogy(y, mu) - mu - _log_factorial(y))))

    def start_mu(self, y):
        return y + 0.1

    def check_response(self, y):
        if np.any(y < 0):
            raise ValueError("poisson responses must be nonnegative")

    def simulate(self, rng, mu, w, dispersion=1.0):
        return rng.poisson(mu).astype(float)


class NegativeBinomial(Family):
    """NB2 with Var = mu + v * mu**2 (``v`` > 0 is the overdispersion)."""

    name = "negative_binomial"

    def __init__(self, v: float = 1.0):
        if not v > 0:
            raise ValueError("negative binomial overdispersion v must be positive")
        self.v = float(v)

    def variance(self, mu):
        return mu + self.v * mu * mu

    def unit_deviance(self, y, mu):
        r = 1.0 / self.v
        return 2.0 * (_xlogy(y, y / mu) - (y + r) * np.log((y + r) / (mu + r)))

    def loglik(self, y, mu, w, dispersion=1.0):
        return float(np.sum(w * nb_loglik_terms(y, mu, 1.0 / self.v)))

    def start_mu(self, y):
        return y + 0.1

    def check_response(self, y):
        if np.any(y < 0):
            raise ValueError("negative binomial responses must be nonnegative")

    def simulate(self, rng, mu, w, dispersion=1.0):
        r = 1.0 / self.v
        lam = rng.gamma(r, mu / r)
        return rng.poisson(lam).astype(float)

    def to_dict(self):
        return {"name": self.name, "v": self.v}

    def __repr__(self):
        return f"NegativeBinomial(v={self.v!r})"


def lgamma_ratio(y, r):
    """log Gamma(y + r) - log Gamma(r), stable for large r and small integer y."""
    y = np.asarray(y, float)
    r = np.broadcast_to(np.asarray(r, float), y.shape)
    ymax = float(y.max()) if y.size else 0.0
    if np.all(y == np.round(y)) and ymax <= 1000:
        out = np.zeros(y.shape)
        for j in range(int(ymax)):
            out += np.where(y > j, np.log(r + j), 0.0)
        return out
    return log_gamma_v(y + r) - log_gamma_v(r)


def nb_loglik_terms(y, mu, r):
    y = np.asarray(y, float)
    return (lgamma_ratio(y, r) - _log_factorial(y)
            - r * np.log1p(mu / r) + _xlogy(y, mu / (r + mu)))


class Gamma(Family):
    name = "gamma"
    fixed_dispersion = False
    extra_params = 1

    def variance(self, mu):
        return mu * mu

    def unit_deviance(self, y, mu):
        return 2.0 * (-np.log(y / mu) + (y - mu) / mu)

    def loglik(self, y, mu, w, dispersion):
        shape = w / dispersion
        return float(np.sum(shape * np.log(shape * y / mu) - shape * y / mu - np.log(y) - log_gamma_v(shape)))

    def start_mu(self, y):
        return np.maximum(y, EPS)

    def check_response(self, y):
        if np.any(y <= 0):
            raise ValueError("gamma responses must be positive")

    def simulate(self, rng, mu, w, dispersion):
        shape = w / dispersion
        return rng.gamma(shape, mu / shape)


class InverseGaussian(Family):
    name = "inverse_gaussian"
    fixed_dispersion = False
    extra_params = 1

    def variance(self, mu):
        return mu ** 3

    def unit_deviance(self, y, mu):
        return (y - mu) ** 2 / (mu * mu * y)

    def loglik(self, y, mu, w, dispersion):
        phi = dispersion / w
        return float(np.sum(-0.5 * (np.log(2 * np.pi * phi * y ** 3) + (y - mu) ** 2 / (phi * mu * mu * y))))

    def start_mu(self, y):
        return np.maximum(y, EPS)

    def check_response(self, y):
        if np.any(y <= 0):
            raise ValueError("inverse gaussian responses must be positive")

    def simulate(self, rng, mu, w, dispersion):
        # IG(mu, lambda) with lambda = 1 / phi_i
        return rng.wald(mu, w / dispersion)


class Bernoulli(Family):
    name = "bernoulli"
    canonical = "logit"

    def variance(self, mu):
        return mu * (1.0 - mu)

    def unit_deviance(self, y, mu):
        return 2.0 * (_xlogy(y, y / mu) + _xlogy(1 - y, (1 - y) / (1 - mu)))

    def loglik(self, y, mu, w, dispersion=1.0):
        return float(np.sum(w * (_xlogy(y, mu) + _xlogy(1 - y, 1 - mu))))

    def start_mu(self, y):
        return (y + 0.5) / 2.0

    def check_response(self, y):
        if np.any((y != 0) & (y != 1)):
            raise ValueError("bernoulli responses must be 0 or 1")

    def simulate(self, rng, mu, w, dispersion=1.0):
        return (rng.random(len(mu)) < mu).astype(float)


FAMILIES = {
    "poisson": Poisson,
    "negative_binomial": NegativeBinomial,
    "gamma": Gamma,
    "inverse_gaussian": InverseGaussian,
    "bernoulli": Bernoulli,
}


def get_family(name: str, **kw) -> Family:
    try:
        cls = FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}") from None
    return cls(**kw)


def family_from_dict(d: dict) -> Family:
    kw = {"v": d["v"]} if d["name"] == "negative_binomial" else {}
    return get_family(d["name"], **kw)
