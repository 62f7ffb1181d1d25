"""Banding schemes: raw policy covariates -> categorical rating levels."""
from __future__ import annotations

import bisect
import sys
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterator

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

DEFAULT_SCHEME = "paper"


class SchemeError(ValueError):
    """Malformed banding configuration."""


class UnknownLevelError(KeyError):
    """A level or raw category that a scheme or model does not know."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown level"


class RatingFactors(Mapping):
    """Immutable mapping dimension -> level for one policy or claim."""

    __slots__ = ("_items", "_dict")

    def __init__(self, levels: Mapping[str, str] | None = None, **kw: str):
        d = dict(levels or {})
        d.update(kw)
        self._dict = d
        self._items = tuple(sorted(d.items()))

    def __getitem__(self, key: str) -> str:
        return self._dict[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._dict)

    def __len__(self) -> int:
        return len(self._dict)

    def __hash__(self) -> int:
        return hash(self._items)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, RatingFactors):
            return self._items == other._items
        if isinstance(other, Mapping):
            return self._dict == dict(other)
        return NotImplemented

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}={v}" for k, v in self._items)
        return f"RatingFactors({inner})"

    def replace(self, **kw: str) -> "RatingFactors":
        return RatingFactors(self._dict, **kw)


@dataclass(frozen=True)
class Dimension:
    """One rating dimension.

    Numeric dimensions carry ``breaks`` (half-open ``[low, high)`` bands, so
    ``len(levels) == len(breaks) + 1``); categorical ones carry ``mapping``
    from raw category to level.
    """

    name: str
    field: str
    levels: tuple[str, ...]
    reference: str
    ordered: bool = False
    breaks: tuple[float, ...] | None = None
    mapping: Mapping[str, str] | None = None
    descriptions: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if len(set(self.levels)) != len(self.levels):
            raise SchemeError(f"{self.name}: duplicate levels")
        if self.reference not in self.levels:
            raise SchemeError(f"{self.name}: reference {self.reference!r} is not a level")
        if self.breaks is not None:
            if len(self.breaks) + 1 != len(self.levels):
                raise SchemeError(f"{self.name}: need len(levels) == len(breaks) + 1")
            if any(b >= a for a, b in zip(self.breaks[1:], self.breaks)):
                raise SchemeError(f"{self.name}: breaks must be strictly increasing")
        elif self.mapping is not None:
            bad = sorted(set(self.mapping.values()) - set(self.levels))
            if bad:
                raise SchemeError(f"{self.name}: map targets {bad} are not levels")

    @property
    def numeric(self) -> bool:
        return self.breaks is not None

    def interval(self, level: str) -> tuple[float, float]:
        """The ``[low, high)`` interval of a numeric level."""
        if self.breaks is None:
            raise SchemeError(f"{self.name} is not a numeric dimension")
        i = self.levels.index(level)
        edges = (-np.inf, *self.breaks, np.inf)
        return float(edges[i]), float(edges[i + 1])

    def band(self, value: Any) -> str:
        if self.breaks is not None:
            return self.levels[bisect.bisect_right(self.breaks, float(value))]
        key = str(value)
        if self.mapping is None:
            if key in self.levels:
                return key
        elif key in self.mapping:
            return self.mapping[key]
        raise UnknownLevelError(f"{self.name}: unknown category {key!r}")

    def band_array(self, values: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`band`; returns an object array of level labels."""
        if self.breaks is not None:
            idx = np.searchsorted(np.asarray(self.breaks, float), np.asarray(values, float), side="right")
            return np.asarray(self.levels, dtype=object)[idx]
        return np.array([self.band(v) for v in values], dtype=object)

    def regroup(self, grouping: Mapping[str, str], levels: tuple[str, ...] | None = None) -> "Dimension":
        """Collapse levels via ``grouping`` (old level -> new level)."""
        new_levels = levels
        if new_levels is None:
            seen: dict[str, None] = {}
            for lv in self.levels:
                seen.setdefault(grouping.get(lv, lv), None)
            new_levels = tuple(seen)
        reference = grouping.get(self.reference, self.reference)
        if self.breaks is not None:
            # merged numeric bands must stay contiguous; drop the interior breaks
            mapped = [grouping.get(lv, lv) for lv in self.levels]
            keep = [b for b, lo, hi in zip(self.breaks, mapped, mapped[1:]) if lo != hi]
            return replace(self, levels=new_levels, reference=reference, breaks=tuple(keep), descriptions=None)
        if self.mapping is None:
            mapping = {lv: grouping.get(lv, lv) for lv in self.levels}
        else:
            mapping = {raw: grouping.get(lv, lv) for raw, lv in self.mapping.items()}
        return replace(self, levels=new_levels, reference=reference, mapping=mapping, descriptions=None)


@dataclass(frozen=True)
class Scheme:
    name: str
    dimensions: Mapping[str, Dimension] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Dimension:
        try:
            return self.dimensions[name]
        except KeyError:
            raise UnknownLevelError(f"scheme {self.name!r} has no dimension {name!r}") from None

    def __contains__(self, name: object) -> bool:
        return name in self.dimensions

    @property
    def fields(self) -> set[str]:
        return {d.field for d in self.dimensions.values()}

    def band(self, record: Any) -> RatingFactors:
        """Band a record (object with attributes or a mapping) on every dimension."""
        get = record.get if isinstance(record, Mapping) else lambda f: getattr(record, f)
        return RatingFactors({d.name: d.band(get(d.field)) for d in self.dimensions.values()})

    def with_dimension(self, dim: Dimension) -> "Scheme":
        dims = dict(self.dimensions)
        dims[dim.name] = dim
        return Scheme(self.name, dims)

    def level_spec(self) -> dict[str, dict[str, Any]]:
        return {
            d.name: {"levels": list(d.levels), "reference": d.reference, "ordered": d.ordered}
            for d in self.dimensions.values()
        }


def _dimension_from_config(cfg: Mapping[str, Any]) -> Dimension:
    try:
        name = cfg["name"]
        levels = tuple(str(x) for x in cfg["levels"])
        reference = str(cfg["reference"])
    except KeyError as exc:
        raise SchemeError(f"dimension missing key {exc}") from None
    breaks = cfg.get("breaks")
    mapping = cfg.get("map")
    if breaks is not None and mapping is not None:
        raise SchemeError(f"{name}: give either breaks or map, not both")
    desc = cfg.get("descriptions")
    return Dimension(
        name=name,
        field=cfg.get("field", name),
        levels=levels,
        reference=reference,
        ordered=bool(cfg.get("ordered", breaks is not None)),
        breaks=tuple(float(b) for b in breaks) if breaks is not None else None,
        mapping={str(k): str(v) for k, v in mapping.items()} if mapping is not None else None,
        descriptions=tuple(desc) if desc is not None else None,
    )


def parse_schemes(text: str) -> dict[str, Scheme]:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise SchemeError(f"invalid TOML: {exc}") from None
    schemes = {}
    for name, body in doc.get("schemes", {}).items():
        dims = [_dimension_from_config(c) for c in body.get("dimensions", [])]
        if len({d.name for d in dims}) != len(dims):
            raise SchemeError(f"scheme {name!r}: duplicate dimension names")
        schemes[name] = Scheme(name, {d.name: d for d in dims})
    if not schemes:
        raise SchemeError("no [schemes.*] tables found")
    return schemes


def load_schemes(path: str | Path | None = None) -> dict[str, Scheme]:
    """Load banding schemes from a TOML file, or the bundled defaults."""
    if path is None:
        text = resources.files("ratemaking").joinpath("data/bands.toml").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_schemes(text)


def load_scheme(name: str = DEFAULT_SCHEME, path: str | Path | None = None) -> Scheme:
    schemes = load_schemes(path)
    if name not in schemes:
        raise SchemeError(f"no scheme named {name!r}; available: {sorted(schemes)}")
    return schemes[name]
