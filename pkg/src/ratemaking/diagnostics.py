"""Residuals, influence measures, simulated envelopes and goodness of fit."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .glm import FittedModel, SingularFitError, fit, refit, simulate
from .specfun import chi_square_survival

__all__ = [
    "DiagnosticsReport", "Envelope", "FlagSet", "Thresholds", "chi_square_survival",
    "cooks_distance", "diagnose", "exact_cooks_distance", "flag_points", "goodness_of_fit",
    "gof_statistics", "leverage", "refit_without", "residuals", "simulated_envelope",
]


def _design(model: FittedModel):
    if model.design is None or model.mu is None:
        raise ValueError("diagnostics need a model fitted on its data (model.design is None)")
    return model.design


def residuals(model: FittedModel, kind: str = "deviance") -> np.ndarray:
    """Pearson ``(y - mu) sqrt(w / V(mu))`` or deviance ``sign(y - mu) sqrt(w d(y, mu))`` residuals.

    Neither is scaled by the dispersion; divide by ``sqrt(phi (1 - h))`` to standardise.
    """
    d = _design(model)
    y, mu, w = d.y, model.mu, d.weights
    if kind == "pearson":
        return (y - mu) * np.sqrt(w / model.family.variance(mu))
    if kind == "deviance":
        ud = np.maximum(model.family.unit_deviance(y, mu), 0.0)
        return np.sign(y - mu) * np.sqrt(w * ud)
    raise ValueError(f"unknown residual kind {kind!r}")


def working_weights(model: FittedModel) -> np.ndarray:
    d = _design(model)
    gp = model.link.deriv(model.mu)
    return d.weights / (gp * gp * model.family.variance(model.mu))


def leverage(model: FittedModel) -> np.ndarray:
    """Diagonal of the weighted hat matrix ``W^1/2 X (X'WX)^-1 X' W^1/2``."""
    d = _design(model)
    sw = np.sqrt(working_weights(model))
    A = d.X * sw[:, None]
    q, r = np.linalg.qr(A)
    diag = np.abs(np.diag(r))
    if diag.size and diag.min() <= diag.max() * 1e-10:
        raise SingularFitError(d.labels)
    return np.clip(np.sum(q * q, axis=1), 0.0, 1.0)


def cooks_distance(model: FittedModel, h: np.ndarray | None = None) -> np.ndarray:
    """One-step Cook's distances ``r_P^2 h / (p phi (1 - h)^2)``; ``h == 1`` gives ``inf``."""
    h = leverage(model) if h is None else h
    rp = residuals(model, "pearson")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = rp ** 2 * h / (model.p * model.dispersion * (1.0 - h) ** 2)
    out[h >= 1.0] = np.inf
    return out


def standardized_deviance_residuals(model: FittedModel, h: np.ndarray | None = None) -> np.ndarray:
    h = leverage(model) if h is None else h
    with np.errstate(divide="ignore", invalid="ignore"):
        return residuals(model, "deviance") / np.sqrt(model.dispersion * (1.0 - h))


def refit_without(model: FittedModel, drop: Sequence[int]) -> FittedModel:
    """Exact refit after deleting observations ``drop``."""
    d = _design(model)
    keep = np.ones(d.n, bool)
    keep[np.asarray(drop, int)] = False
    sub = replace(d, X=d.X[keep], y=d.y[keep], offset=d.offset[keep], weights=d.weights[keep])
    return fit(sub, model.family, model.link, model.control, start=model.coefficients)


def exact_cooks_distance(model: FittedModel, indices: Sequence[int] | None = None) -> np.ndarray:
    """Cook's distance from actual deletion refits: ``db' (X'WX) db / (p phi)``."""
    d = _design(model)
    idx = range(d.n) if indices is None else indices
    info = np.linalg.inv(model.cov_unscaled)
    out = []
    for i in idx:
        db = refit_without(model, [i]).coefficients - model.coefficients
        out.append(float(db @ info @ db) / (model.p * model.dispersion))
    return np.array(out)


# ---------------------------------------------------------------- goodness of fit

def gof_statistics(model: FittedModel) -> tuple[float, float]:
    """Scaled deviance ``D / phi`` and the Pearson statistic ``sum w (y - mu)^2 / V(mu)``."""
    pearson = float(np.sum(residuals(model, "pearson") ** 2))
    return model.scaled_deviance, pearson


def goodness_of_fit(model: FittedModel | None = None, df: float | None = None, *,
                    deviance: float | None = None, pearson: float | None = None) -> tuple[float, float]:
    """Chi-square p-values for the scaled deviance and the Pearson statistic.

    Either pass a fitted model (``df`` defaults to ``n - p``) or the two
    statistics directly.
    """
    if model is not None:
        dstar, x2 = gof_statistics(model)
        df = model.n - model.p if df is None else df
    else:
        if deviance is None or pearson is None or df is None:
            raise ValueError("give a model, or deviance, pearson and df")
        dstar, x2 = deviance, pearson
    if df <= 0:
        raise ValueError("df must be positive")
    return chi_square_survival(dstar, df), chi_square_survival(x2, df)


# ---------------------------------------------------------------- envelope

@dataclass(frozen=True)
class Envelope:
    theoretical: np.ndarray
    observed: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    median: np.ndarray
    replicates: int
    percentiles: tuple[float, float] | None
    seed: int
    failed: int = 0

    @property
    def coverage(self) -> float:
        inside = (self.observed >= self.lower) & (self.observed <= self.upper)
        return float(np.mean(inside))


def half_normal_quantiles(n: int) -> np.ndarray:
    nd = NormalDist()
    return np.array([nd.inv_cdf((i + n - 0.125) / (2 * n + 0.5)) for i in range(1, n + 1)])


def _replicate(model: FittedModel, seed: int, r: int, max_attempts: int):
    for attempt in range(max_attempts):
        y = simulate(model, [seed, r, attempt])
        try:
            m = refit(model, y)
        except (SingularFitError, ValueError, FloatingPointError):
            continue
        if not m.converged:
            continue
        try:
            return np.sort(np.abs(standardized_deviance_residuals(m)))
        except SingularFitError:
            continue
    return None


def simulated_envelope(model: FittedModel, replicates: int = 100,
                       percentiles: tuple[float, float] | None = (2.5, 97.5),
                       seed: int = 0, jobs: int = 1, max_attempts: int = 5) -> Envelope:
    """Half-normal simulated envelope of standardized absolute deviance residuals.

    Each replicate simulates responses at the fitted means, refits the same
    design and records its sorted absolute residuals. ``percentiles=None``
    gives the classical min/max band. Replicate ``r`` draws from the stream
    seeded by ``(seed, r, attempt)`` so results do not depend on ``jobs``.
    """
    if replicates < 19:
        raise ValueError("need at least 19 replicates")
    observed = np.sort(np.abs(standardized_deviance_residuals(model)))
    n = observed.size
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            sims = list(ex.map(lambda r: _replicate(model, seed, r, max_attempts), range(replicates)))
    else:
        sims = [_replicate(model, seed, r, max_attempts) for r in range(replicates)]
    ok = [s for s in sims if s is not None]
    failed = len(sims) - len(ok)
    if len(ok) < 2:
        raise RuntimeError("envelope replicates failed to converge")
    S = np.vstack(ok)
    if percentiles is None:
        lower, upper = S.min(axis=0), S.max(axis=0)
    else:
        lo, hi = percentiles
        if not 0 <= lo < hi <= 100:
            raise ValueError("percentiles must satisfy 0 <= low < high <= 100")
        lower, upper = np.percentile(S, [lo, hi], axis=0)
    return Envelope(
        theoretical=half_normal_quantiles(n), observed=observed, lower=lower, upper=upper,
        median=np.median(S, axis=0), replicates=replicates,
        percentiles=None if percentiles is None else (float(percentiles[0]), float(percentiles[1])),
        seed=seed, failed=failed,
    )


# ---------------------------------------------------------------- report

@dataclass(frozen=True)
class Thresholds:
    cook: float
    leverage: float
    abs_residual: float = 2.0

    @classmethod
    def default(cls, n: int, p: int) -> "Thresholds":
        return cls(cook=8.0 / (n - 2 * p) if n > 2 * p else math.inf, leverage=2.0 * p / n, abs_residual=2.0)


@dataclass(frozen=True)
class FlagSet:
    influential: np.ndarray
    leverage: np.ndarray
    outlier: np.ndarray
    thresholds: Thresholds
    n: int

    def summary(self) -> str:
        def part(name, idx):
            pct = 100.0 * len(idx) / self.n if self.n else 0.0
            return f"{len(idx)} ({pct:.0f}%) {name}"
        t = self.thresholds
        return (f"{part('influential', self.influential)} [Cook > {t.cook:.4g}], "
                f"{part('high leverage', self.leverage)} [h > {t.leverage:.4g}], "
                f"{part('outlying', self.outlier)} [|r| > {t.abs_residual:.4g}]")


@dataclass(frozen=True)
class DiagnosticsReport:
    y: np.ndarray
    mu: np.ndarray
    pearson: np.ndarray
    deviance: np.ndarray
    standardized: np.ndarray
    leverage: np.ndarray
    cook: np.ndarray
    scaled_deviance: float
    pearson_chi2: float
    df: int
    p_deviance: float
    p_pearson: float
    p: int
    envelope: Envelope | None = None

    @property
    def n(self) -> int:
        return self.y.size


def diagnose(model: FittedModel, envelope: Envelope | None = None) -> DiagnosticsReport:
    d = _design(model)
    h = leverage(model)
    dstar, x2 = gof_statistics(model)
    df = model.n - model.p
    pd, pp = goodness_of_fit(deviance=dstar, pearson=x2, df=df) if df > 0 else (math.nan, math.nan)
    return DiagnosticsReport(
        y=d.y, mu=model.mu, pearson=residuals(model, "pearson"), deviance=residuals(model, "deviance"),
        standardized=standardized_deviance_residuals(model, h), leverage=h, cook=cooks_distance(model, h),
        scaled_deviance=dstar, pearson_chi2=x2, df=df, p_deviance=pd, p_pearson=pp, p=model.p,
        envelope=envelope,
    )


def flag_points(report: DiagnosticsReport, thresholds: Thresholds | None = None) -> FlagSet:
    t = thresholds or Thresholds.default(report.n, report.p)
    return FlagSet(
        influential=np.flatnonzero(report.cook > t.cook),
        leverage=np.flatnonzero(report.leverage > t.leverage),
        outlier=np.flatnonzero(np.abs(report.standardized) > t.abs_residual),
        thresholds=t,
        n=report.n,
    )
