"""Model comparison by AIC/BIC and greedy merging of indistinguishable levels."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bands import Scheme
from .design import Formula, RatingData, build_design, column_label, parse_formula
from .families import Family, get_family
from .glm import FitControl, FittedModel, fit, fit_negbin, wald_test


def _family(family: Family | str) -> Family | str:
    if isinstance(family, str) and family != "negative_binomial":
        return get_family(family)
    return family


def fit_formula(data: RatingData, formula: Formula | str, scheme: Scheme, family: Family | str,
                link: str = "log", control: FitControl | None = None) -> FittedModel:
    """Build the design for ``formula`` and fit it; ``family="negative_binomial"`` estimates v."""
    if isinstance(formula, str):
        formula = parse_formula(formula)
    design = build_design(data, formula, scheme)
    fam = _family(family)
    if fam == "negative_binomial":
        return fit_negbin(design, control)
    return fit(design, fam, link, control)


@dataclass(frozen=True)
class ComparisonRow:
    formula: str
    k: int
    loglik: float
    aic: float
    bic: float
    converged: bool
    order: int
    model: FittedModel | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[ComparisonRow, ...]

    @property
    def best_aic(self) -> ComparisonRow | None:
        ok = [r for r in self.rows if r.converged]
        return min(ok, key=lambda r: (r.aic, r.k, r.order)) if ok else None

    @property
    def best_bic(self) -> ComparisonRow | None:
        ok = [r for r in self.rows if r.converged]
        return min(ok, key=lambda r: (r.bic, r.k, r.order)) if ok else None

    def sorted_by(self, criterion: str = "aic") -> list[ComparisonRow]:
        return sorted(self.rows, key=lambda r: (getattr(r, criterion), r.k, r.order))

    def to_text(self) -> str:
        ba, bb = self.best_aic, self.best_bic
        width = max([len("Model")] + [len(r.formula) for r in self.rows])
        lines = [f"{'Model':<{width}}  {'k':>3}  {'logLik':>12}  {'AIC':>12}  {'BIC':>12}",
                 "-" * (width + 47)]
        for r in self.rows:
            a = f"{r.aic:.1f}" + ("*" if r is ba else " ")
            b = f"{r.bic:.1f}" + ("*" if r is bb else " ")
            note = "" if r.converged else "  (not converged)"
            lines.append(f"{r.formula:<{width}}  {r.k:>3}  {r.loglik:>12.1f}  {a:>12}  {b:>12}{note}")
        lines.append("* minimum among converged candidates")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["formula", "k", "loglik", "AIC", "BIC", "converged", "best_aic", "best_bic"])
        ba, bb = self.best_aic, self.best_bic
        for r in self.rows:
            w.writerow([r.formula, r.k, repr(r.loglik), repr(r.aic), repr(r.bic),
                        int(r.converged), int(r is ba), int(r is bb)])
        return buf.getvalue()


def compare_models(data: RatingData, family: Family | str, link: str, formulas: Sequence[Formula | str],
                   scheme: Scheme, control: FitControl | None = None, jobs: int = 1) -> ComparisonTable:
    """Fit every candidate on the same rows; rows sorted by AIC, then k, then input order."""
    if len(formulas) < 2:
        raise ValueError("compare_models needs at least two formulas")
    parsed = [parse_formula(f) if isinstance(f, str) else f for f in formulas]
    responses = {f.response for f in parsed}
    if len(responses) != 1:
        raise ValueError(f"candidates model different responses: {sorted(responses)}")

    def one(f):
        return fit_formula(data, f, scheme, family, link, control)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            models = list(ex.map(one, parsed))
    else:
        models = [one(f) for f in parsed]
    rows = [ComparisonRow(str(f), m.k, m.loglik, m.aic, m.bic, m.converged, i, m)
            for i, (f, m) in enumerate(zip(parsed, models))]
    rows.sort(key=lambda r: (r.aic, r.k, r.order))
    return ComparisonTable(tuple(rows))


@dataclass(frozen=True)
class MergeStep:
    first: str
    second: str
    p_value: float
    merged_into: str


@dataclass(frozen=True)
class LevelGrouping:
    dimension: str
    mapping: dict[str, str]
    history: tuple[MergeStep, ...]
    scheme: Scheme = field(repr=False, compare=False)
    model: FittedModel | None = field(default=None, repr=False, compare=False)

    @property
    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for orig, new in self.mapping.items():
            out.setdefault(new, []).append(orig)
        return out

    def partition(self) -> set[frozenset[str]]:
        return {frozenset(v) for v in self.groups.values()}

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "mapping": dict(self.mapping),
            "history": [{"pair": [s.first, s.second], "p_value": s.p_value, "merged_into": s.merged_into}
                        for s in self.history],
        }


def _pair_p(model: FittedModel, dim: str, a: str, b: str, reference: str) -> float:
    c = np.zeros(model.p)
    for lv, sign in ((a, 1.0), (b, -1.0)):
        if lv == reference:
            continue
        c[model.labels.index(column_label([(dim, lv)]))] += sign
    try:
        return wald_test(model, c)[1]
    except ValueError:
        return 1.0


def merge_levels(data: RatingData, family: Family | str, link: str, formula: Formula | str,
                 dimension: str, scheme: Scheme, alpha: float = 0.05,
                 control: FitControl | None = None) -> LevelGrouping:
    """Greedily merge the level pair with the largest Wald p-value while it exceeds ``alpha``.

    Ordered dimensions only merge adjacent levels; nominal ones may merge any
    pair. Ties on p are broken by the lexicographic level pair. The group
    holding the reference level keeps the reference's name.
    """
    if isinstance(formula, str):
        formula = parse_formula(formula)
    if dimension not in formula.mains:
        raise ValueError(f"{dimension!r} is not a main effect of {formula}")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    dim = scheme[dimension]
    mapping = {lv: lv for lv in dim.levels}
    history: list[MergeStep] = []
    cur_data, cur_scheme = data, scheme
    while True:
        model = fit_formula(cur_data, formula, cur_scheme, family, link, control)
        cdim = cur_scheme[dimension]
        estimable = [lv for lv in cdim.levels
                     if lv == cdim.reference or column_label([(dimension, lv)]) in model.labels]
        if cdim.ordered:
            pairs = list(zip(estimable, estimable[1:]))
        else:
            pairs = [(a, b) for i, a in enumerate(estimable) for b in estimable[i + 1:]]
        if not pairs:
            break
        scored = [(_pair_p(model, dimension, a, b, cdim.reference), tuple(sorted((a, b))), a, b) for a, b in pairs]
        # largest p first; ties by lexicographic pair
        scored.sort(key=lambda s: (-s[0], s[1]))
        p, _, a, b = scored[0]
        if not p > alpha:
            break
        if len(estimable) <= 2:
            raise ValueError(f"merging would leave {dimension!r} with a single level; drop the dimension instead")
        if cdim.reference in (a, b):
            new = cdim.reference
        else:
            ia, ib = cdim.levels.index(a), cdim.levels.index(b)
            new = f"{a}+{b}" if ia < ib else f"{b}+{a}"
        step = {a: new, b: new}
        history.append(MergeStep(a, b, float(p), new))
        mapping = {orig: step.get(cur, cur) for orig, cur in mapping.items()}
        cur_data = cur_data.relabel(dimension, step)
        cur_scheme = cur_scheme.with_dimension(cdim.regroup(step))
    return LevelGrouping(dimension, mapping, tuple(history), cur_scheme, model)


def apply_grouping(data: RatingData, scheme: Scheme, grouping: LevelGrouping) -> tuple[RatingData, Scheme]:
    dim = scheme[grouping.dimension]
    return (data.relabel(grouping.dimension, grouping.mapping),
            scheme.with_dimension(dim.regroup(grouping.mapping)))
