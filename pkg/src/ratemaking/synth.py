"""Synthetic policy/claim portfolios drawn from known frequency and severity models.

A generator spec (JSON) gives covariate marginals, an exposure distribution
and the true coefficients; all draws come from one seeded generator so the
output is a pure function of (spec, n, seed).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .bands import RatingFactors, Scheme, load_scheme
from .design import RatingData, parse_label
from .ingest import CLAIM_COLUMNS, POLICY_COLUMNS

CATEGORICAL_FIELDS = ("class", "make", "policy_class", "region", "gender")
NUMERIC_FIELDS = {"age": int, "model_year_offset": int, "insured_value": float}


class GeneratorSpecError(ValueError):
    pass


def load_generator_spec(path: str | Path | None = None) -> dict[str, Any]:
    if path is None:
        text = resources.files("ratemaking").joinpath("data/demo_generator.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    spec = json.loads(text)
    validate_spec(spec)
    return spec


def validate_spec(spec: Mapping[str, Any]) -> None:
    cov = spec.get("covariates")
    if not isinstance(cov, Mapping):
        raise GeneratorSpecError("spec needs a 'covariates' object")
    for f in (*CATEGORICAL_FIELDS, *NUMERIC_FIELDS):
        if f not in cov:
            raise GeneratorSpecError(f"covariates lack {f!r}")
    for f in CATEGORICAL_FIELDS:
        probs = cov[f]
        if not isinstance(probs, Mapping) or not probs or any(p < 0 for p in probs.values()):
            raise GeneratorSpecError(f"{f}: expected a mapping category -> probability")
    for f in NUMERIC_FIELDS:
        bins = cov[f]
        if not isinstance(bins, list) or not bins:
            raise GeneratorSpecError(f"{f}: expected a list of [low, high, probability] bins")
        for b in bins:
            if len(b) != 3 or not b[0] < b[1] or b[2] < 0:
                raise GeneratorSpecError(f"{f}: bad bin {b!r}")
    if "frequency" not in spec:
        raise GeneratorSpecError("spec needs a 'frequency' model")
    for part in ("frequency", "severity"):
        if part in spec and not isinstance(spec[part].get("coefficients"), Mapping):
            raise GeneratorSpecError(f"{part}: needs a 'coefficients' mapping")


def _normalise(p) -> np.ndarray:
    p = np.asarray(p, float)
    if p.sum() <= 0:
        raise GeneratorSpecError("probabilities sum to zero")
    return p / p.sum()


def _draw_numeric(rng, bins, n, kind) -> np.ndarray:
    probs = _normalise([b[2] for b in bins])
    which = rng.choice(len(bins), size=n, p=probs)
    lo = np.array([b[0] for b in bins], float)[which]
    hi = np.array([b[1] for b in bins], float)[which]
    if kind is int:
        return rng.integers(lo.astype(np.int64), hi.astype(np.int64))
    return lo + (hi - lo) * rng.random(n)


def linear_predictor(coefficients: Mapping[str, float], bands: Mapping[str, np.ndarray], n: int) -> np.ndarray:
    """Sum of coefficients whose label's levels all match; unknown labels are errors."""
    eta = np.zeros(n)
    for label, beta in coefficients.items():
        term = parse_label(label)
        col = np.ones(n, bool)
        for d, lv in term:
            if d not in bands:
                raise GeneratorSpecError(f"coefficient {label!r} uses unknown dimension {d!r}")
            col &= bands[d] == lv
        eta += float(beta) * col
    return eta


@dataclass
class Portfolio:
    policies: dict[str, np.ndarray]
    claim_policy: np.ndarray   # index into the policy arrays
    claim_amount: np.ndarray
    bands: dict[str, np.ndarray]
    frequency_mean: np.ndarray
    severity_mean: np.ndarray | None

    @property
    def n(self) -> int:
        return len(self.policies["policy_id"])


def _covariates(rng, spec, n: int, scheme: Scheme):
    cov = spec["covariates"]
    width = max(6, len(str(n)))
    pol: dict[str, np.ndarray] = {"policy_id": np.array([f"P{i:0{width}d}" for i in range(1, n + 1)], dtype=object)}
    exp_spec = spec.get("exposure", {"fixed": 1.0})
    if "fixed" in exp_spec:
        pol["exposure"] = np.full(n, float(exp_spec["fixed"]))
    else:
        lo, hi = float(exp_spec["low"]), float(exp_spec["high"])
        if not 0 < lo < hi:
            raise GeneratorSpecError("exposure needs 0 < low < high")
        pol["exposure"] = np.round(lo + (hi - lo) * rng.random(n), 4)
    for f in CATEGORICAL_FIELDS:
        cats = list(cov[f])
        pol[f] = np.asarray(cats, dtype=object)[rng.choice(len(cats), size=n, p=_normalise(list(cov[f].values())))]
    for f, kind in NUMERIC_FIELDS.items():
        vals = _draw_numeric(rng, cov[f], n, kind)
        pol[f] = np.round(vals, 2) if kind is float else vals
    bands = {d.name: d.band_array(pol[d.field]) for d in scheme.dimensions.values()}
    return pol, bands


def _amounts(rng, spec, bands, rows: np.ndarray, n: int):
    sev = spec["severity"]
    mean = np.exp(linear_predictor(sev["coefficients"], bands, n))
    shape = 1.0 / float(sev.get("dispersion", 1.0))
    m = mean[rows]
    return mean, rng.gamma(shape, m / shape)


def generate(spec: Mapping[str, Any], n: int, seed: int, scheme: Scheme | None = None) -> Portfolio:
    """Draw ``n`` policies, their claim counts and (if the spec has a severity model) claim amounts."""
    validate_spec(spec)
    if n < 0:
        raise GeneratorSpecError("n must be nonnegative")
    scheme = scheme or load_scheme(spec.get("scheme", "paper"))
    rng = np.random.default_rng(seed)
    pol, bands = _covariates(rng, spec, n, scheme)
    freq = spec["frequency"]
    mu = pol["exposure"] * np.exp(linear_predictor(freq["coefficients"], bands, n))
    v = freq.get("v")
    if v:
        r = 1.0 / float(v)
        counts = rng.poisson(rng.gamma(r, mu / r))
    else:
        counts = rng.poisson(mu)
    pol["claim_count"] = counts
    claim_policy = np.repeat(np.arange(n), counts)
    sev_mean, amounts = None, np.zeros(0)
    if "severity" in spec:
        sev_mean, amounts = _amounts(rng, spec, bands, claim_policy, n)
    return Portfolio(pol, claim_policy, amounts, bands, mu, sev_mean)


def generate_claims(spec: Mapping[str, Any], n_claims: int, seed: int, scheme: Scheme | None = None) -> Portfolio:
    """Exactly ``n_claims`` claims, one per drawn policy, from the severity model."""
    validate_spec(spec)
    if "severity" not in spec:
        raise GeneratorSpecError("spec has no severity model")
    scheme = scheme or load_scheme(spec.get("scheme", "paper"))
    rng = np.random.default_rng(seed)
    pol, bands = _covariates(rng, spec, n_claims, scheme)
    pol["claim_count"] = np.ones(n_claims, np.int64)
    rows = np.arange(n_claims)
    sev_mean, amounts = _amounts(rng, spec, bands, rows, n_claims)
    return Portfolio(pol, rows, amounts, bands, np.ones(n_claims), sev_mean)


def _factors(port: Portfolio, dimensions: Sequence[str], rows: np.ndarray) -> list[RatingFactors]:
    cols = [port.bands[d][rows] for d in dimensions]
    return [RatingFactors(dict(zip(dimensions, vals))) for vals in zip(*cols)]


def frequency_rating_data(port: Portfolio, dimensions: Sequence[str]) -> RatingData:
    """Policy-level claim counts with exposure, banded on ``dimensions``."""
    rows = np.arange(port.n)
    return RatingData(_factors(port, dimensions, rows), port.policies["claim_count"].astype(float),
                      port.policies["exposure"])


def severity_rating_data(port: Portfolio, dimensions: Sequence[str]) -> RatingData:
    """One row per claim carrying its policy's levels."""
    return RatingData(_factors(port, dimensions, port.claim_policy), port.claim_amount)


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def write_portfolio(port: Portfolio, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p_path, c_path = out / "policies.csv", out / "claims.csv"
    P = port.policies
    with open(p_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POLICY_COLUMNS)
        for i in range(port.n):
            w.writerow([P["policy_id"][i], _fmt(P["exposure"][i]), int(P["claim_count"][i]), P["class"][i],
                        P["make"][i], int(P["model_year_offset"][i]), P["policy_class"][i], P["region"][i],
                        P["gender"][i], int(P["age"][i]), _fmt(P["insured_value"][i])])
    with open(c_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CLAIM_COLUMNS)
        ids = P["policy_id"]
        for j, a in zip(port.claim_policy, port.claim_amount):
            w.writerow([ids[j], _fmt(a)])
    return p_path, c_path
