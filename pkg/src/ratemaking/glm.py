"""GLM fitting by iteratively reweighted least squares.

The weighted least-squares step is solved through a QR factorisation of
``sqrt(W) X``. Deviance never increases between accepted iterates: a step
that raises it is halved back towards the previous coefficients.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .bands import UnknownLevelError
from .design import DesignMatrix, Formula, model_row, parse_formula, parse_label
from .families import (
    EPS, Family, Gamma, Link, NegativeBinomial, Poisson,
    family_from_dict, get_link, nb_loglik_terms,
)
from .specfun import digamma, normal_sf, trigamma

SCHEMA_VERSION = 1
# 2 * log-likelihood gain below which an NB fit is treated as Poisson:
# 95% point of the 50:50 mixture of chi2_0 and chi2_1 (boundary test for v = 0).
POISSON_LIMIT_LR = 2.705543454095404
POLISH_STEPS = 25
SCORE_FLOOR = 1e-10


class SingularFitError(np.linalg.LinAlgError):
    def __init__(self, columns: Sequence[str]):
        self.columns = tuple(columns)
        super().__init__(f"weighted cross-product is singular; collinear columns: {', '.join(self.columns)}")


@dataclass(frozen=True)
class FitControl:
    max_iter: int = 50
    tol: float = 1e-10
    max_halvings: int = 10
    eps: float = EPS

    def __post_init__(self):
        if self.max_iter <= 0 or self.tol <= 0 or self.max_halvings <= 0 or self.eps <= 0:
            raise ValueError("FitControl values must be positive")


@dataclass(frozen=True)
class FittedModel:
    formula: Formula
    family: Family
    link: Link
    labels: tuple[str, ...]
    coefficients: np.ndarray
    cov_unscaled: np.ndarray
    levels: Mapping[str, Mapping]
    n: int
    deviance: float
    loglik: float
    dispersion: float
    dispersion_deviance: float | None = None
    dispersion_ml: float | None = None
    nb_v: float | None = None
    n_extra: int = 0
    iterations: int = 0
    converged: bool = True
    flags: tuple[str, ...] = ()
    aliased: tuple[str, ...] = ()
    deviance_trace: tuple[float, ...] = ()
    score_norm: float | None = None
    eta: np.ndarray | None = None
    mu: np.ndarray | None = None
    design: DesignMatrix | None = field(default=None, repr=False)
    control: FitControl = FitControl()

    @property
    def p(self) -> int:
        return len(self.coefficients)

    @property
    def k(self) -> int:
        """Parameter count used by AIC/BIC."""
        return self.p + self.n_extra

    @property
    def terms(self) -> tuple[tuple[tuple[str, str], ...], ...]:
        return tuple(parse_label(lb) for lb in self.labels)

    @property
    def scaled_deviance(self) -> float:
        return self.deviance / self.dispersion

    @property
    def covariance(self) -> np.ndarray:
        return self.dispersion * self.cov_unscaled

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    @property
    def aic(self) -> float:
        return aic(self)

    @property
    def bic(self) -> float:
        return bic(self)

    def coef(self, label: str) -> float:
        return float(self.coefficients[self.labels.index(label)])

    def coefficient_table(self) -> list[dict[str, float | str]]:
        se = self.std_errors
        rows = []
        for lb, b, s in zip(self.labels, self.coefficients, se):
            z = b / s if s > 0 else math.nan
            rows.append({
                "label": lb, "estimate": float(b), "std_error": float(s), "z": float(z),
                "p_value": 2 * normal_sf(abs(z)) if math.isfinite(z) else math.nan,
                "exp_estimate": math.exp(b),
            })
        return rows


# ---------------------------------------------------------------- fitting

def _collinear_columns(A: np.ndarray, labels: Sequence[str]) -> list[str]:
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    tol = s.max() * max(A.shape) * np.finfo(float).eps * 1e3
    null = vt[s <= tol]
    if null.size == 0:
        null = vt[-1:]
    involved = np.any(np.abs(null) > 1e-8, axis=0)
    return [lb for lb, flag in zip(labels, involved) if flag]


def _wls(X: np.ndarray, z: np.ndarray, w: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    sw = np.sqrt(w)
    A = X * sw[:, None]
    q, r = np.linalg.qr(A)
    d = np.abs(np.diag(r))
    if d.size and (d.min() <= d.max() * 1e-10 or not np.all(np.isfinite(r))):
        raise SingularFitError(_collinear_columns(A, labels))
    beta = np.linalg.solve(r, q.T @ (sw * z))
    rinv = np.linalg.solve(r, np.eye(r.shape[0]))
    return beta, rinv @ rinv.T


def _irls(design: DesignMatrix, family: Family, link: Link, control: FitControl,
          start: np.ndarray | None = None) -> dict[str, Any]:
    X, y, off, pw = design.X, design.y, design.offset, design.weights
    family.check_response(y)
    if start is None:
        mu = link.clamp(family.start_mu(y), control.eps)
        eta = link(mu) - off
        beta = None
        dev_old = family.deviance(y, mu, pw)
    else:
        beta = np.asarray(start, float)
        eta = X @ beta
        mu = link.clamp(link.inverse(eta + off), control.eps)
        dev_old = family.deviance(y, mu, pw)
    trace = [dev_old] if beta is not None else []
    converged = False
    halving_failed = False
    it = 0
    cov = None
    for it in range(1, control.max_iter + 1):
        gp = link.deriv(mu)
        z = eta + (y - mu) * gp
        w = pw / (gp * gp * family.variance(mu))
        beta_new, cov = _wls(X, z, w, design.labels)
        eta_new = X @ beta_new
        mu_new = link.clamp(link.inverse(eta_new + off), control.eps)
        dev = family.deviance(y, mu_new, pw)
        if beta is not None:
            halvings = 0
            while (not np.isfinite(dev) or dev > dev_old * (1 + 1e-12) + 1e-12) and halvings < control.max_halvings:
                beta_new = 0.5 * (beta_new + beta)
                eta_new = X @ beta_new
                mu_new = link.clamp(link.inverse(eta_new + off), control.eps)
                dev = family.deviance(y, mu_new, pw)
                halvings += 1
            if not np.isfinite(dev) or dev > dev_old * (1 + 1e-12) + 1e-12:
                halving_failed = True
                break
        beta, eta, mu = beta_new, eta_new, mu_new
        trace.append(dev)
        if abs(dev - dev_old) / (abs(dev) + 0.1) < control.tol:
            converged = True
            break
        dev_old = dev
    # the deviance test stops while beta can still be ~sqrt(tol) off, and
    # non-canonical links converge only linearly: keep stepping while the
    # score shrinks and the deviance does not rise
    def score_of(mu_):
        return float(np.max(np.abs(X.T @ (pw * (y - mu_) / (link.deriv(mu_) * family.variance(mu_))))))

    score = score_of(mu)
    if converged:
        for _ in range(POLISH_STEPS):
            if score < SCORE_FLOOR:
                break
            gp = link.deriv(mu)
            w = pw / (gp * gp * family.variance(mu))
            beta_p, _ = _wls(X, eta + (y - mu) * gp, w, design.labels)
            eta_p = X @ beta_p
            mu_p = link.clamp(link.inverse(eta_p + off), control.eps)
            dev_p = family.deviance(y, mu_p, pw)
            if not np.isfinite(dev_p) or dev_p > trace[-1] * (1 + 1e-12) + 1e-12:
                break
            score_p = score_of(mu_p)
            if not score_p < score:
                break
            beta, eta, mu, score = beta_p, eta_p, mu_p, score_p
            trace[-1] = dev_p
    gp = link.deriv(mu)
    w = pw / (gp * gp * family.variance(mu))
    _, cov = _wls(X, eta + (y - mu) * gp, w, design.labels)
    flags = ("step_halving_failed",) if halving_failed else ()
    if not converged:
        flags = flags + ("not_converged",)
    return dict(beta=beta, eta=eta, mu=mu, cov=cov, deviance=trace[-1], iterations=it,
                converged=converged, trace=tuple(trace), score=score, flags=flags)


def _pearson_dispersion(y, mu, pw, family, n, p) -> float:
    if n <= p:
        return math.nan
    return float(np.sum(pw * (y - mu) ** 2 / family.variance(mu)) / (n - p))


def gamma_ml_dispersion(y, mu, pw, start: float | None = None, tol: float = 1e-12) -> float:
    """Maximum-likelihood gamma dispersion (1 / shape) at fixed means."""
    y, mu, pw = (np.asarray(a, float) for a in (y, mu, pw))
    ratio = y / mu
    base = float(np.sum(pw * (np.log(ratio) + 1.0 - ratio)))
    uw, inv = np.unique(pw, return_inverse=True)
    counts = np.bincount(inv)

    def grad_hess(nu):
        s = nu * uw
        dg = np.array([digamma(x) for x in s])
        tg = np.array([trigamma(x) for x in s])
        g = base + float(np.sum(counts * uw * (np.log(s) - dg)))
        h = float(np.sum(counts * uw * (1.0 / nu - uw * tg)))
        return g, h

    dev = float(np.sum(pw * 2 * (-np.log(ratio) + ratio - 1)))
    n = float(np.sum(pw))
    if dev <= 0:
        return 0.0
    nu = 1.0 / start if start and start > 0 else n / dev
    # Newton in log(nu); the profile likelihood is concave in nu
    for _ in range(200):
        g, h = grad_hess(nu)
        gt = nu * g
        ht = nu * nu * h + nu * g
        step = -gt / ht if ht < 0 else math.copysign(1.0, gt)
        step = max(-5.0, min(5.0, step))
        nu *= math.exp(step)
        if abs(step) < tol:
            break
    return 1.0 / nu


def fit(design: DesignMatrix, family: Family, link: Link | str = "log",
        control: FitControl | None = None, start: np.ndarray | None = None) -> FittedModel:
    """Fit a GLM; a non-converged fit is returned with ``converged=False``."""
    control = control or FitControl()
    link = get_link(link) if isinstance(link, str) else link
    r = _irls(design, family, link, control, start)
    y, pw, mu = design.y, design.weights, r["mu"]
    n, p = design.n, design.p
    dev = r["deviance"]
    if family.fixed_dispersion:
        phi, phi_ml = 1.0, None
    else:
        phi = _pearson_dispersion(y, mu, pw, family, n, p)
        if not phi > 0:
            # exact fit: the likelihood is unbounded as the dispersion shrinks
            phi_ml = 0.0
        elif isinstance(family, Gamma):
            phi_ml = gamma_ml_dispersion(y, mu, pw, start=phi)
        else:
            phi_ml = float(np.sum(pw * family.unit_deviance(y, mu)) / n)
    if phi_ml == 0.0:
        ll = math.inf
    else:
        ll = family.loglik(y, mu, pw, phi_ml if phi_ml is not None else 1.0)
    return FittedModel(
        formula=design.formula, family=family, link=link, labels=design.labels,
        coefficients=r["beta"], cov_unscaled=r["cov"], levels=design.levels, n=n,
        deviance=dev, loglik=ll, dispersion=phi,
        dispersion_deviance=dev / (n - p) if n > p else math.nan,
        dispersion_ml=phi_ml,
        nb_v=getattr(family, "v", None), n_extra=family.extra_params,
        iterations=r["iterations"], converged=r["converged"], flags=r["flags"],
        aliased=design.aliased, deviance_trace=r["trace"], score_norm=r["score"],
        eta=r["eta"], mu=mu, design=design, control=control,
    )


def _nb_profile(y, mu, pw, tau):
    r = math.exp(-tau)
    return float(np.sum(pw * nb_loglik_terms(y, mu, r)))


def _nb_score(y, mu, pw, r):
    y = np.asarray(y, float)
    ymax = float(y.max()) if y.size else 0.0
    if np.all(y == np.round(y)) and ymax <= 1000:
        dpsi = np.zeros_like(y)
        dtri = np.zeros_like(y)
        for j in range(int(ymax)):
            on = y > j
            dpsi += np.where(on, 1.0 / (r + j), 0.0)
            dtri -= np.where(on, 1.0 / (r + j) ** 2, 0.0)
    else:
        dpsi = np.array([digamma(a + r) - digamma(r) for a in y])
        dtri = np.array([trigamma(a + r) - trigamma(r) for a in y])
    g = float(np.sum(pw * (dpsi - np.log1p(mu / r) + (mu - y) / (r + mu))))
    h = float(np.sum(pw * (dtri + 1.0 / r - 1.0 / (r + mu) - (mu - y) / (r + mu) ** 2)))
    return g, h


V_FLOOR = 1e-8


def nb_overdispersion_ml(y, mu, pw, v0: float, tol: float = 1e-10, max_iter: int = 100) -> float:
    """Newton maximisation of the NB log-likelihood in ``v`` (on the log scale) at fixed means.

    Returns 0.0 when the maximum sits on the boundary v -> 0.
    """
    tau = math.log(max(v0, 1e-6))
    ll = _nb_profile(y, mu, pw, tau)
    for _ in range(max_iter):
        r = math.exp(-tau)
        g_r, h_r = _nb_score(y, mu, pw, r)
        gt = -r * g_r
        ht = r * r * h_r + r * g_r
        step = -gt / ht if ht < 0 else math.copysign(1.0, gt)
        step = max(-3.0, min(3.0, step))
        for _ in range(30):
            cand = tau + step
            ll_c = _nb_profile(y, mu, pw, cand)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            step *= 0.5
        tau, ll = cand, ll_c
        if math.exp(tau) < V_FLOOR:
            return 0.0
        if abs(step) < tol:
            break
    return math.exp(tau)


def fit_negbin(design: DesignMatrix, control: FitControl | None = None,
               max_outer: int = 50) -> FittedModel:
    """Negative binomial (Var = mu + v mu^2) log-link fit with estimated ``v``.

    Alternates IRLS for the coefficients at fixed ``v`` with a Newton update
    of ``v`` at fixed means. When the data show no overdispersion (``v``
    hits zero or the likelihood-ratio gain over Poisson is below the 5%
    boundary critical value) the Poisson fit is returned, flagged
    ``poisson_limit``, with the estimated ``v`` kept in ``nb_v``.
    """
    control = control or FitControl()
    y, pw = design.y, design.weights
    pois = fit(design, Poisson(), "log", control)
    mu = pois.mu
    v_mom = float(np.sum(pw * ((y - mu) ** 2 - y)) / np.sum(pw * mu * mu))
    v = nb_overdispersion_ml(y, mu, pw, v_mom if v_mom > 0 else 1e-3, control.tol)
    model = pois
    outer_converged = False
    if v > 0:
        beta = pois.coefficients
        for _ in range(max_outer):
            model = fit(design, NegativeBinomial(v), "log", control, start=beta)
            v_new = nb_overdispersion_ml(y, model.mu, pw, v, control.tol)
            if v_new <= 0:
                v = 0.0
                break
            dbeta = float(np.max(np.abs(model.coefficients - beta)))
            dv = abs(v_new - v) / v
            beta, v = model.coefficients, v_new
            if dv < 1e-8 and dbeta < 1e-8:
                outer_converged = True
                break
        if v > 0:
            model = fit(design, NegativeBinomial(v), "log", control, start=beta)
    if v <= 0 or 2.0 * (model.loglik - pois.loglik) < POISSON_LIMIT_LR:
        return replace(pois, nb_v=v, flags=pois.flags + ("poisson_limit",))
    flags = model.flags if outer_converged else model.flags + ("v_not_converged",)
    return replace(model, nb_v=v, n_extra=1, flags=flags,
                   converged=model.converged and outer_converged)


def refit(model: FittedModel, y: np.ndarray | None = None, design: DesignMatrix | None = None) -> FittedModel:
    """Refit the same formula/family/link on new responses or a new design."""
    design = design or model.design
    if design is None:
        raise ValueError("model has no design attached")
    if y is not None:
        design = replace(design, y=np.asarray(y, float))
    return fit(design, model.family, model.link, model.control)


# ---------------------------------------------------------------- inference

def log_likelihood(model: FittedModel) -> float:
    return model.loglik


def aic(model: FittedModel) -> float:
    return -2.0 * model.loglik + 2.0 * model.k


def bic(model: FittedModel) -> float:
    return -2.0 * model.loglik + model.k * math.log(model.n)


def estimate_dispersion(model: FittedModel, method: str = "pearson") -> float:
    if model.n <= model.p:
        raise ValueError("dispersion needs n > p")
    if method == "deviance":
        return model.deviance / (model.n - model.p)
    if method == "pearson":
        d = _require_design(model)
        return _pearson_dispersion(d.y, model.mu, d.weights, model.family, model.n, model.p)
    raise ValueError(f"unknown dispersion method {method!r}")


def covariance(model: FittedModel) -> np.ndarray:
    return model.covariance


def wald_test(model: FittedModel, contrast: Sequence[float]) -> tuple[float, float]:
    """Two-sided Wald z test of ``contrast . beta = 0``."""
    c = np.asarray(contrast, float)
    if c.shape != (model.p,):
        raise ValueError(f"contrast length {c.size} != p = {model.p}")
    var = float(c @ model.covariance @ c)
    if not var > 0:
        raise ValueError("contrast has zero variance")
    z = float(c @ model.coefficients) / math.sqrt(var)
    return z, 2.0 * normal_sf(abs(z))


def _row(model: FittedModel, factors: Mapping[str, str]) -> np.ndarray:
    for lb in model.aliased:
        term = parse_label(lb)
        if len(term) == 1 and factors.get(term[0][0]) == term[0][1]:
            raise UnknownLevelError(f"level {term[0][1]!r} of {term[0][0]!r} has no estimate in this model")
    return model_row(model.terms, factors, model.levels)


def predict(model: FittedModel, factors: Mapping[str, str], exposure: float = 1.0) -> float:
    """Mean response for one rating-factor combination (aliased interactions contribute nothing)."""
    eta = float(_row(model, factors) @ model.coefficients)
    if model.formula.offset:
        if exposure <= 0:
            raise ValueError("exposure must be positive")
        eta += math.log(exposure)
    return float(model.link.inverse(np.array([eta]))[0])


def simulate(model: FittedModel, seed) -> np.ndarray:
    """One draw per observation from the fitted distribution at the fitted means."""
    d = _require_design(model)
    rng = np.random.default_rng(seed)
    return model.family.simulate(rng, model.mu, d.weights, model.dispersion)


def _require_design(model: FittedModel) -> DesignMatrix:
    if model.design is None or model.mu is None:
        raise ValueError("operation needs the fitted data; refit the model on its design")
    return model.design


# ---------------------------------------------------------------- serialization

def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def model_to_dict(model: FittedModel) -> dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "formula": str(model.formula),
        "offset": model.formula.offset,
        "family": model.family.to_dict(),
        "link": model.link.name,
        "levels": {d: dict(spec) for d, spec in model.levels.items()},
        "coefficients": [{k: (_num(v) if k != "label" else v) for k, v in row.items()}
                         for row in model.coefficient_table()],
        "aliased": list(model.aliased),
        "covariance_unscaled": [[float(x) for x in row] for row in model.cov_unscaled],
        "dispersion": _num(model.dispersion),
        "dispersion_deviance": _num(model.dispersion_deviance),
        "dispersion_ml": _num(model.dispersion_ml),
        "nb_v": _num(model.nb_v),
        "n_extra": model.n_extra,
        "deviance": _num(model.deviance),
        "scaled_deviance": _num(model.scaled_deviance),
        "loglik": _num(model.loglik),
        "aic": _num(model.aic),
        "bic": _num(model.bic),
        "n": model.n,
        "p": model.p,
        "iterations": model.iterations,
        "converged": model.converged,
        "flags": list(model.flags),
        "score_norm": _num(model.score_norm),
    }


def model_from_dict(doc: Mapping[str, Any]) -> FittedModel:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema version {doc.get('schema_version')!r}")
    formula = parse_formula(doc["formula"], offset=bool(doc.get("offset", False)))
    rows = doc["coefficients"]
    labels = [r["label"] for r in rows]
    aliased = list(doc.get("aliased", []))
    est = []
    for r in rows:
        if r.get("estimate") is None:
            raise ValueError(f"coefficient {r['label']!r} has no estimate; list it under 'aliased'")
        est.append(float(r["estimate"]))
    phi = float(doc.get("dispersion") or 1.0)
    if doc.get("covariance_unscaled") is not None:
        cov = np.array(doc["covariance_unscaled"], float)
    else:
        se = np.array([r.get("std_error") or 0.0 for r in rows], float)
        cov = np.diag(se * se) / phi
    nb_v = doc.get("nb_v")
    fam = family_from_dict(doc["family"])
    return FittedModel(
        formula=formula, family=fam, link=get_link(doc["link"]),
        labels=tuple(labels), coefficients=np.array(est), cov_unscaled=cov,
        levels={d: dict(s) for d, s in doc["levels"].items()},
        n=int(doc.get("n") or 0),
        deviance=float(doc["deviance"]) if doc.get("deviance") is not None else math.nan,
        loglik=float(doc["loglik"]) if doc.get("loglik") is not None else math.nan,
        dispersion=phi,
        dispersion_deviance=doc.get("dispersion_deviance"),
        dispersion_ml=doc.get("dispersion_ml"),
        nb_v=float(nb_v) if nb_v is not None else None,
        n_extra=int(doc.get("n_extra", fam.extra_params)),
        iterations=int(doc.get("iterations", 0)),
        converged=bool(doc.get("converged", True)),
        flags=tuple(doc.get("flags", ())),
        aliased=tuple(aliased),
        score_norm=doc.get("score_norm"),
    )


def save_model(model: FittedModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=2, ensure_ascii=False)
        fh.write("\n")


def load_model(path) -> FittedModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
