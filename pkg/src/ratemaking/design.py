"""Formulas, treatment-coded design matrices and covariate-pattern cells."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .bands import RatingFactors, Scheme, UnknownLevelError
from .ingest import ClaimRecord, PolicyRecord, band_policy

INTERCEPT = "(Intercept)"
FREQUENCY_RESPONSES = {"count", "claim_count", "claims", "n"}
SEP = "×"


class FormulaError(ValueError):
    pass


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class Formula:
    response: str
    mains: tuple[str, ...] = ()
    interactions: tuple[tuple[str, ...], ...] = ()
    offset: bool = False

    def __post_init__(self):
        if len(set(self.mains)) != len(self.mains):
            raise FormulaError(f"duplicate main effect in {self}")
        seen = set()
        for term in self.interactions:
            if len(term) < 2:
                raise FormulaError(f"interaction {term} needs two or more dimensions")
            if len(set(term)) != len(term):
                raise FormulaError(f"interaction {':'.join(term)} repeats a dimension")
            missing = [d for d in term if d not in self.mains]
            if missing:
                raise FormulaError(f"interaction {':'.join(term)} lacks main effects for {missing}")
            key = frozenset(term)
            if key in seen:
                raise FormulaError(f"duplicate interaction {':'.join(term)}")
            seen.add(key)

    @property
    def role(self) -> str:
        return "frequency" if self.offset else "severity"

    @property
    def dimensions(self) -> tuple[str, ...]:
        return self.mains

    @property
    def terms(self) -> list[tuple[str, ...]]:
        return [(m,) for m in self.mains] + list(self.interactions)

    def rhs(self) -> str:
        terms = [":".join(t) for t in self.terms]
        return " + ".join(terms) if terms else "1"

    def __str__(self) -> str:
        return f"{self.response} ~ {self.rhs()}"

    def with_terms(self, mains: Sequence[str], interactions: Sequence[Sequence[str]] = ()) -> "Formula":
        return Formula(self.response, tuple(mains), tuple(tuple(t) for t in interactions), self.offset)


_TERM = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*(:[A-Za-z_][A-Za-z0-9_]*)*$")


def parse_formula(text: str, offset: bool | None = None) -> Formula:
    """Parse ``response ~ a + b + a:b``.

    ``offset`` defaults to True for count responses (log-exposure offset)
    and False otherwise.
    """
    if "~" not in text:
        raise FormulaError(f"formula {text!r} has no '~'")
    lhs, rhs = (s.strip() for s in text.split("~", 1))
    if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", lhs):
        raise FormulaError(f"bad response name {lhs!r}")
    mains: list[str] = []
    inter: list[tuple[str, ...]] = []
    for raw in rhs.split("+"):
        term = raw.strip()
        if term in ("1", ""):
            if term == "" and rhs.strip():
                raise FormulaError(f"empty term in {text!r}")
            continue
        if not _TERM.match(term):
            raise FormulaError(f"bad term {term!r}")
        parts = tuple(term.split(":"))
        if len(parts) == 1:
            mains.append(parts[0])
        else:
            inter.append(parts)
    if offset is None:
        offset = lhs in FREQUENCY_RESPONSES
    return Formula(lhs, tuple(mains), tuple(inter), offset)


@dataclass
class RatingData:
    """Banded observations ready for design construction.

    ``exposure`` is None for severity data (no offset).
    """

    factors: list[RatingFactors]
    y: np.ndarray
    exposure: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, float)
        n = len(self.factors)
        if self.y.shape != (n,):
            raise DesignError("response length does not match factors")
        if self.exposure is not None:
            self.exposure = np.asarray(self.exposure, float)
            if self.exposure.shape != (n,):
                raise DesignError("exposure length does not match factors")
        self.weights = np.ones(n) if self.weights is None else np.asarray(self.weights, float)

    def __len__(self) -> int:
        return len(self.factors)

    def subset(self, index) -> "RatingData":
        idx = np.arange(len(self))[index]
        return RatingData(
            [self.factors[i] for i in idx],
            self.y[idx],
            None if self.exposure is None else self.exposure[idx],
            self.weights[idx],
        )

    def relabel(self, dimension: str, grouping: Mapping[str, str]) -> "RatingData":
        fac = [f.replace(**{dimension: grouping.get(f[dimension], f[dimension])}) for f in self.factors]
        return RatingData(fac, self.y, self.exposure, self.weights)

    def column(self, dimension: str) -> np.ndarray:
        try:
            return np.array([f[dimension] for f in self.factors], dtype=object)
        except KeyError:
            raise UnknownLevelError(f"data has no dimension {dimension!r}") from None


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray
    labels: tuple[str, ...]
    terms: tuple[tuple[tuple[str, str], ...], ...]
    y: np.ndarray
    offset: np.ndarray
    weights: np.ndarray
    formula: Formula
    levels: Mapping[str, Mapping]
    aliased: tuple[str, ...] = ()
    aliased_terms: tuple[tuple[tuple[str, str], ...], ...] = ()

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def column_label(term: Sequence[tuple[str, str]]) -> str:
    if not term:
        return INTERCEPT
    return SEP.join(f"{d}:{lv}" for d, lv in term)


def parse_label(label: str) -> tuple[tuple[str, str], ...]:
    if label == INTERCEPT:
        return ()
    out = []
    for part in label.split(SEP):
        d, _, lv = part.partition(":")
        if not lv:
            raise DesignError(f"malformed column label {label!r}")
        out.append((d, lv))
    return tuple(out)


def _term_columns(term: tuple[str, ...], levels: Mapping[str, Mapping]) -> list[tuple[tuple[str, str], ...]]:
    """Non-reference level combinations of a term; the first dimension varies fastest."""
    per_dim = [[lv for lv in levels[d]["levels"] if lv != levels[d]["reference"]] for d in term]
    combos: list[tuple[tuple[str, str], ...]] = [()]
    for d, lvls in zip(term, per_dim):
        combos = [c + ((d, lv),) for lv in lvls for c in combos]
    return combos


def design_columns(formula: Formula, levels: Mapping[str, Mapping]) -> list[tuple[tuple[str, str], ...]]:
    cols: list[tuple[tuple[str, str], ...]] = [()]
    for term in formula.terms:
        cols.extend(_term_columns(term, levels))
    return cols


def level_spec_for(formula: Formula, scheme: Scheme) -> dict[str, dict]:
    spec = {}
    for d in formula.mains:
        dim = scheme[d]
        spec[d] = {"levels": list(dim.levels), "reference": dim.reference, "ordered": dim.ordered}
    return spec


def evaluate_columns(columns: Sequence[tuple[tuple[str, str], ...]], factor_cols: Mapping[str, np.ndarray], n: int) -> np.ndarray:
    X = np.empty((n, len(columns)))
    for j, term in enumerate(columns):
        col = np.ones(n)
        for d, lv in term:
            col = col * (factor_cols[d] == lv)
        X[:, j] = col
    return X


def build_design(data: RatingData, formula: Formula, scheme: Scheme | Mapping[str, Mapping],
                 drop_empty: bool = True) -> DesignMatrix:
    """Treatment-coded design for ``formula``.

    Columns that are identically zero (levels or interaction cells absent
    from the data) are dropped and reported in ``aliased``.
    """
    levels = level_spec_for(formula, scheme) if isinstance(scheme, Scheme) else {d: scheme[d] for d in formula.mains}
    n = len(data)
    factor_cols = {}
    for d in formula.mains:
        col = data.column(d)
        known = set(levels[d]["levels"])
        unseen = sorted(set(col) - known)
        if unseen:
            raise UnknownLevelError(f"dimension {d!r}: level {unseen[0]!r} is not in the scheme")
        factor_cols[d] = col
    columns = design_columns(formula, levels)
    X = evaluate_columns(columns, factor_cols, n)
    aliased: list[tuple[tuple[str, str], ...]] = []
    if drop_empty:
        keep = np.any(X != 0, axis=0)
        keep[0] = True
        aliased = [c for c, k in zip(columns, keep) if not k]
        columns = [c for c, k in zip(columns, keep) if k]
        X = X[:, keep]
    if n < X.shape[1]:
        raise DesignError(f"unidentifiable design: n={n} < p={X.shape[1]}")
    if formula.offset:
        if data.exposure is None:
            raise DesignError("formula needs an exposure offset but the data has no exposure")
        offset = np.log(data.exposure)
    else:
        offset = np.zeros(n)
    return DesignMatrix(
        X=X,
        labels=tuple(column_label(c) for c in columns),
        terms=tuple(columns),
        y=data.y,
        offset=offset,
        weights=data.weights,
        formula=formula,
        levels=levels,
        aliased=tuple(column_label(c) for c in aliased),
        aliased_terms=tuple(aliased),
    )


def model_row(terms: Sequence[tuple[tuple[str, str], ...]], factors: Mapping[str, str],
              levels: Mapping[str, Mapping]) -> np.ndarray:
    """Design row for a single set of rating factors."""
    for d, spec in levels.items():
        if d not in factors:
            raise UnknownLevelError(f"missing level for dimension {d!r}")
        if factors[d] not in spec["levels"]:
            raise UnknownLevelError(f"dimension {d!r}: unknown level {factors[d]!r}")
    return np.array([float(all(factors[d] == lv for d, lv in t)) for t in terms])


@dataclass(frozen=True)
class RatingCell:
    levels: RatingFactors
    exposure: float
    claims: float
    policies: int


def aggregate_cells(data: RatingData, dimensions: Sequence[str]) -> list[RatingCell]:
    """Collapse observations to one cell per observed level combination.

    Cells are returned in order of first appearance; zero-exposure cells are omitted.
    """
    if not dimensions:
        raise DesignError("aggregate_cells needs at least one dimension")
    if data.exposure is None:
        raise DesignError("aggregate_cells needs exposure")
    acc: dict[tuple[str, ...], list] = {}
    for f, y, e in zip(data.factors, data.y, data.exposure):
        key = tuple(f[d] for d in dimensions)
        slot = acc.get(key)
        if slot is None:
            acc[key] = [e, y, 1]
        else:
            slot[0] += e
            slot[1] += y
            slot[2] += 1
    return [
        RatingCell(RatingFactors(dict(zip(dimensions, key))), float(e), float(y), int(k))
        for key, (e, y, k) in acc.items()
        if e > 0
    ]


def cells_to_data(cells: Iterable[RatingCell]) -> RatingData:
    cells = list(cells)
    return RatingData(
        [c.levels for c in cells],
        np.array([c.claims for c in cells]),
        np.array([c.exposure for c in cells]),
    )


def frequency_data(policies: Sequence[PolicyRecord], scheme: Scheme) -> RatingData:
    return RatingData(
        [band_policy(p, scheme) for p in policies],
        np.array([p.claim_count for p in policies], float),
        np.array([p.exposure for p in policies], float),
    )


def severity_data(policies: Sequence[PolicyRecord], claims: Sequence[ClaimRecord], scheme: Scheme) -> RatingData:
    """One observation per claim carrying the owning policy's rating factors.

    Claims for unknown policies raise; filter them with ``parse_claims(policy_ids=...)`` first.
    """
    by_id = {p.policy_id: p for p in policies}
    banded: dict[str, RatingFactors] = {}
    factors, amounts = [], []
    for c in claims:
        if c.policy_id not in by_id:
            raise DesignError(f"claim references unknown policy {c.policy_id!r}")
        if c.policy_id not in banded:
            banded[c.policy_id] = band_policy(by_id[c.policy_id], scheme)
        factors.append(banded[c.policy_id])
        amounts.append(c.amount)
    return RatingData(factors, np.array(amounts, float))
