"""Multiplicative tariffs composed from frequency and severity models."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

from .bands import UnknownLevelError
from .design import column_label, design_columns
from .glm import FittedModel, model_to_dict

TARIFF_VERSION = 1
SECTIONS = ("frequency", "severity")
SECTION_TITLES = {"frequency": "Frecuencia", "severity": "Severidad"}
NOTE_NO_INTERACTION = "estimate excludes interaction"


class TariffError(ValueError):
    pass


class TariffExclusionError(TariffError):
    """The requested risk is outside what the tariff covers."""


@dataclass(frozen=True)
class FactorGroup:
    section: str
    dimensions: tuple[str, ...]
    factors: dict[str, float]
    notes: dict[str, str] = field(default_factory=dict)

    @property
    def key(self) -> str:
        return ":".join(self.dimensions)


@dataclass(frozen=True)
class Exclusion:
    dimension: str
    level: str
    reason: str


@dataclass(frozen=True)
class TariffTable:
    base_premium: float
    base_frequency: float
    base_severity: float
    base_class: dict[str, str]
    groups: tuple[FactorGroup, ...]
    exclusions: tuple[Exclusion, ...] = ()
    provenance: dict[str, Any] = field(default_factory=dict, compare=False)

    def group(self, key: str) -> FactorGroup:
        for g in self.groups:
            if g.key == key:
                return g
        raise KeyError(key)

    @property
    def dimensions(self) -> list[str]:
        return [d for g in self.groups for d in g.dimensions]

    def excluded(self, dimension: str, level: str) -> Exclusion | None:
        for e in self.exclusions:
            if e.dimension == dimension and e.level == level:
                return e
        return None


def _components(model: FittedModel) -> list[tuple[str, ...]]:
    parent = {d: d for d in model.formula.mains}

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    for term in model.formula.interactions:
        root = find(term[0])
        for d in term[1:]:
            parent[find(d)] = root
    groups: dict[str, list[str]] = {}
    for d in model.formula.mains:
        groups.setdefault(find(d), []).append(d)
    return [tuple(v) for v in groups.values()]


def _section(model: FittedModel, section: str) -> tuple[list[FactorGroup], list[Exclusion]]:
    if model.link.name != "log":
        raise TariffError(f"{section} model uses the {model.link.name} link; a multiplicative tariff needs log")
    coef = dict(zip(model.labels, model.coefficients))
    aliased = set(model.aliased)
    columns = design_columns(model.formula, model.levels)
    exclusions = []
    bad_levels: set[tuple[str, str]] = set()
    for term in columns:
        if len(term) == 1 and column_label(term) in aliased:
            d, lv = term[0]
            bad_levels.add((d, lv))
            exclusions.append(Exclusion(d, lv, f"level {lv} of {d} has no estimate in the {section} model"))
    groups = []
    for dims in _components(model):
        factors: dict[str, float] = {}
        notes: dict[str, str] = {}
        for combo in itertools.product(*(model.levels[d]["levels"] for d in dims)):
            assign = dict(zip(dims, combo))
            if any((d, lv) in bad_levels for d, lv in assign.items()):
                continue
            log_f = 0.0
            missing_interaction = False
            for term in columns:
                if not term or any(d not in assign for d, _ in term):
                    continue
                if all(assign[d] == lv for d, lv in term):
                    label = column_label(term)
                    if label in coef:
                        log_f += coef[label]
                    elif len(term) > 1:
                        missing_interaction = True
            key = ":".join(combo)
            factors[key] = math.exp(log_f)
            if missing_interaction:
                notes[key] = NOTE_NO_INTERACTION
        groups.append(FactorGroup(section, dims, factors, notes))
    return groups, exclusions


def build_tariff(freq: FittedModel, sev: FittedModel) -> TariffTable:
    """Base premium ``exp(b0_freq) * exp(b0_sev)`` with per-group relativities.

    Dimensions linked by interactions are stored as one joint group whose
    factor composes the main effects and the interaction coefficient.
    """
    for name, m in (("frequency", freq), ("severity", sev)):
        if not m.converged:
            raise TariffError(f"{name} model did not converge")
    shared = set(freq.levels) & set(sev.levels)
    if shared:
        raise TariffError(f"dimensions {sorted(shared)} appear in both models")
    fg, fe = _section(freq, "frequency")
    sg, se = _section(sev, "severity")
    b0f = math.exp(freq.coef("(Intercept)"))
    b0s = math.exp(sev.coef("(Intercept)"))
    base_class = {d: spec["reference"] for m in (freq, sev) for d, spec in m.levels.items()}
    return TariffTable(
        base_premium=b0f * b0s, base_frequency=b0f, base_severity=b0s, base_class=base_class,
        groups=tuple(fg + sg), exclusions=tuple(fe + se),
        provenance={"frequency": model_to_dict(freq), "severity": model_to_dict(sev)},
    )


@dataclass(frozen=True)
class Quote:
    premium: float
    premium_smmlv: float
    exposure: float
    conversion: float | None
    applied: tuple[tuple[str, str, float], ...]
    notes: tuple[str, ...] = ()


def quote(table: TariffTable, factors: Mapping[str, str], exposure: float = 1.0,
          conversion: float | None = None) -> Quote:
    """Pure premium = base x product of applicable factors x exposure (x conversion)."""
    if not exposure > 0:
        raise ValueError("exposure must be positive")
    if conversion is not None and not conversion > 0:
        raise ValueError("conversion must be positive")
    premium = table.base_premium
    applied = []
    notes = []
    for g in table.groups:
        levels = []
        for d in g.dimensions:
            if d not in factors:
                raise UnknownLevelError(f"quote needs a level for {d!r}")
            ex = table.excluded(d, factors[d])
            if ex is not None:
                raise TariffExclusionError(f"not covered by this tariff: {ex.reason}")
            levels.append(factors[d])
        key = ":".join(levels)
        if key not in g.factors:
            raise UnknownLevelError(f"{g.key}: unknown level {key!r}")
        f = g.factors[key]
        premium *= f
        applied.append((g.key, key, f))
        if key in g.notes:
            notes.append(f"{g.key} {key}: {g.notes[key]}")
    smmlv = premium * exposure
    total = smmlv * conversion if conversion is not None else smmlv
    return Quote(total, smmlv, exposure, conversion, tuple(applied), tuple(notes))


# ---------------------------------------------------------------- persistence

def tariff_to_dict(table: TariffTable) -> dict[str, Any]:
    factors: dict[str, dict[str, float]] = {}
    joint: dict[str, dict[str, float]] = {}
    for g in table.groups:
        (factors if len(g.dimensions) == 1 else joint)[g.key] = dict(g.factors)
    return {
        "version": TARIFF_VERSION,
        "base_premium_smmlv": table.base_premium,
        "base_frequency": table.base_frequency,
        "base_severity": table.base_severity,
        "base_class": dict(table.base_class),
        "sections": {s: [g.key for g in table.groups if g.section == s] for s in SECTIONS},
        "factors": factors,
        "joint_factors": joint,
        "notes": {g.key: dict(g.notes) for g in table.groups if g.notes},
        "exclusions": [{"dimension": e.dimension, "level": e.level, "reason": e.reason} for e in table.exclusions],
        "provenance": table.provenance,
    }


def _positive(x: Any, where: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x) or x <= 0:
        raise TariffError(f"{where}: factor must be a positive finite number, got {x!r}")
    return float(x)


def tariff_from_dict(doc: Mapping[str, Any]) -> TariffTable:
    if not isinstance(doc, Mapping):
        raise TariffError("tariff document must be an object")
    if doc.get("version") != TARIFF_VERSION:
        raise TariffError(f"unsupported tariff version {doc.get('version')!r}")
    for key in ("base_premium_smmlv", "base_class", "sections", "factors", "joint_factors"):
        if key not in doc:
            raise TariffError(f"tariff document lacks {key!r}")
    base_class = dict(doc["base_class"])
    base = _positive(doc["base_premium_smmlv"], "base_premium_smmlv")
    notes = doc.get("notes", {})
    groups = []
    seen_dims: set[str] = set()
    for section in SECTIONS:
        for gkey in doc["sections"].get(section, []):
            src = doc["factors"] if gkey in doc["factors"] else doc["joint_factors"]
            if gkey not in src:
                raise TariffError(f"section {section} names unknown group {gkey!r}")
            dims = tuple(gkey.split(":"))
            for d in dims:
                if d in seen_dims:
                    raise TariffError(f"dimension {d!r} appears in more than one group")
                if d not in base_class:
                    raise TariffError(f"base class has no entry for {d!r}")
                seen_dims.add(d)
            facs = {str(k): _positive(v, f"{gkey}[{k}]") for k, v in src[gkey].items()}
            base_key = ":".join(base_class[d] for d in dims)
            if base_key not in facs:
                raise TariffError(f"{gkey}: missing base-class entry {base_key!r}")
            if abs(facs[base_key] - 1.0) > 1e-12:
                raise TariffError(f"{gkey}: base-class factor is {facs[base_key]}, expected 1")
            groups.append(FactorGroup(section, dims, facs, dict(notes.get(gkey, {}))))
    excl = tuple(Exclusion(e["dimension"], e["level"], e.get("reason", "")) for e in doc.get("exclusions", []))
    return TariffTable(
        base_premium=base,
        base_frequency=float(doc.get("base_frequency", math.nan)),
        base_severity=float(doc.get("base_severity", math.nan)),
        base_class=base_class, groups=tuple(groups), exclusions=excl,
        provenance=dict(doc.get("provenance", {})),
    )


def save_tariff(table: TariffTable, path=None) -> str:
    text = json.dumps(tariff_to_dict(table), indent=2, ensure_ascii=False) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def load_tariff(source) -> TariffTable:
    """Load from a path or a JSON string/dict."""
    if isinstance(source, Mapping):
        return tariff_from_dict(source)
    text = str(source)
    if not text.lstrip().startswith("{"):
        with open(text, encoding="utf-8") as fh:
            text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TariffError(f"invalid tariff JSON: {exc}") from None
    return tariff_from_dict(doc)


def tariff_text(table: TariffTable) -> str:
    """Table-style rendering with factors to three decimals."""
    lines = [f"Base premium: {table.base_frequency:.3f} x {table.base_severity:.3f} = {table.base_premium:.3f} SMMLV",
             "Base class: " + ", ".join(f"{d}={lv}" for d, lv in table.base_class.items()), ""]
    for section in SECTIONS:
        lines.append(SECTION_TITLES[section])
        for g in (g for g in table.groups if g.section == section):
            lines.append(f"  {g.key}")
            for k, f in g.factors.items():
                mark = "*" if k in g.notes else ""
                base = " (base)" if k == ":".join(table.base_class[d] for d in g.dimensions) else ""
                lines.append(f"    {k:<14} {f:.3f}{mark}{base}")
        lines.append("")
    if any(g.notes for g in table.groups):
        lines.append(f"* {NOTE_NO_INTERACTION}")
    for e in table.exclusions:
        lines.append(f"excluded: {e.dimension}={e.level} ({e.reason})")
    return "\n".join(lines).rstrip() + "\n"
