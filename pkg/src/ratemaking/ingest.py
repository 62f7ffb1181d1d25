"""Policy and claim CSV ingestion with row-level validation."""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, TextIO

from .bands import RatingFactors, Scheme, UnknownLevelError

POLICY_COLUMNS = (
    "policy_id", "exposure", "claim_count", "class", "make", "model_year_offset",
    "policy_class", "region", "gender", "age", "insured_value",
)
CLAIM_COLUMNS = ("policy_id", "amount")

MIN_AGE, MAX_AGE = 16, 100
MIN_MODEL_YEAR = 1900


class CSVFormatError(ValueError):
    """The stream cannot be read as the documented CSV layout."""


class Reason(str, Enum):
    BAD_MODEL_YEAR = "bad_model_year"
    BAD_AGE = "bad_age"
    NONPOSITIVE_VALUE = "nonpositive_value"
    NONPOSITIVE_AMOUNT = "nonpositive_amount"
    MISSING_FIELD = "missing_field"
    UNPARSEABLE = "unparseable"
    BAD_EXPOSURE = "bad_exposure"
    BAD_CLAIM_COUNT = "bad_claim_count"
    UNKNOWN_POLICY = "unknown_policy"


@dataclass(frozen=True)
class Rejection:
    row: int  # 0-based index among data rows
    reason: Reason
    detail: str = ""


@dataclass(frozen=True)
class PolicyRecord:
    policy_id: str
    exposure: float
    claim_count: int
    vehicle_class: str
    make: str
    model_year_offset: int
    policy_class: str
    region: str
    gender: str
    age: int
    insured_value: float

    @property
    def field_values(self) -> dict[str, object]:
        """Raw values keyed by the CSV column names (``class`` included)."""
        return {
            "policy_id": self.policy_id, "exposure": self.exposure, "claim_count": self.claim_count,
            "class": self.vehicle_class, "make": self.make, "model_year_offset": self.model_year_offset,
            "policy_class": self.policy_class, "region": self.region, "gender": self.gender,
            "age": self.age, "insured_value": self.insured_value,
        }


@dataclass(frozen=True)
class ClaimRecord:
    policy_id: str
    amount: float


class _RowError(Exception):
    def __init__(self, reason: Reason, detail: str):
        super().__init__(detail)
        self.reason = reason
        self.detail = detail


def _open(source: TextIO | str | Iterable[str]) -> Iterable[str]:
    if isinstance(source, str):
        return io.StringIO(source)
    return source


def _reader(source, required: tuple[str, ...]) -> tuple[csv.DictReader, list[str]]:
    try:
        reader = csv.DictReader(_open(source))
        header = reader.fieldnames
    except (csv.Error, UnicodeDecodeError) as exc:
        raise CSVFormatError(f"unreadable header: {exc}") from None
    if header is None:
        raise CSVFormatError("empty input: no header row")
    header = [h.strip() for h in header]
    missing = [c for c in required if c not in header]
    if missing:
        raise CSVFormatError(f"header is missing columns {missing}")
    reader.fieldnames = header
    return reader, header


def _get(row: dict, key: str) -> str:
    raw = row.get(key)
    if raw is None or raw.strip() == "":
        raise _RowError(Reason.MISSING_FIELD, f"missing {key}")
    return raw.strip()


def _number(row: dict, key: str, kind=float):
    raw = _get(row, key)
    try:
        val = float(raw)
    except ValueError:
        raise _RowError(Reason.UNPARSEABLE, f"{key}={raw!r} is not a number") from None
    if not math.isfinite(val):
        raise _RowError(Reason.UNPARSEABLE, f"{key}={raw!r} is not finite")
    if kind is int:
        if val != int(val):
            raise _RowError(Reason.UNPARSEABLE, f"{key}={raw!r} is not an integer")
        return int(val)
    return val


def _policy_from_row(row: dict, scheme: Scheme | None) -> PolicyRecord:
    if None in row:
        raise _RowError(Reason.UNPARSEABLE, "too many fields")
    for key in POLICY_COLUMNS:
        _get(row, key)
    if row.get("model_year", "").strip():
        year = _number(row, "model_year", int)
        if year < MIN_MODEL_YEAR:
            raise _RowError(Reason.BAD_MODEL_YEAR, f"model year {year} before {MIN_MODEL_YEAR}")
    exposure = _number(row, "exposure")
    if exposure <= 0:
        raise _RowError(Reason.BAD_EXPOSURE, f"exposure {exposure} <= 0")
    count = _number(row, "claim_count", int)
    if count < 0:
        raise _RowError(Reason.BAD_CLAIM_COUNT, f"claim_count {count} < 0")
    age = _number(row, "age", int)
    if not MIN_AGE <= age <= MAX_AGE:
        raise _RowError(Reason.BAD_AGE, f"age {age} outside [{MIN_AGE}, {MAX_AGE}]")
    value = _number(row, "insured_value")
    if value <= 0:
        raise _RowError(Reason.NONPOSITIVE_VALUE, f"insured_value {value} <= 0")
    rec = PolicyRecord(
        policy_id=_get(row, "policy_id"),
        exposure=exposure,
        claim_count=count,
        vehicle_class=_get(row, "class"),
        make=_get(row, "make"),
        model_year_offset=_number(row, "model_year_offset", int),
        policy_class=_get(row, "policy_class"),
        region=_get(row, "region"),
        gender=_get(row, "gender"),
        age=age,
        insured_value=value,
    )
    if scheme is not None:
        try:
            scheme.band(rec.field_values)
        except UnknownLevelError as exc:
            raise _RowError(Reason.UNPARSEABLE, str(exc)) from None
    return rec


def parse_policies(source: TextIO | str | Iterable[str],
                   scheme: Scheme | None = None) -> tuple[list[PolicyRecord], list[Rejection]]:
    """Parse ``policies.csv``.

    Row-level problems are collected as :class:`Rejection` entries; only an
    unreadable or incomplete header raises :class:`CSVFormatError`. When a
    scheme is given, rows whose categories it cannot band are rejected too.
    """
    reader, _ = _reader(source, POLICY_COLUMNS)
    accepted: list[PolicyRecord] = []
    rejected: list[Rejection] = []
    i = 0
    while True:
        try:
            row = next(reader)
        except StopIteration:
            break
        except csv.Error as exc:
            rejected.append(Rejection(i, Reason.UNPARSEABLE, str(exc)))
            i += 1
            continue
        try:
            accepted.append(_policy_from_row(row, scheme))
        except _RowError as exc:
            rejected.append(Rejection(i, exc.reason, exc.detail))
        i += 1
    return accepted, rejected


def parse_claims(source: TextIO | str | Iterable[str],
                 policy_ids: set[str] | None = None) -> tuple[list[ClaimRecord], list[Rejection]]:
    """Parse ``claims.csv``; with ``policy_ids``, orphan claims are rejected as ``unknown_policy``."""
    reader, _ = _reader(source, CLAIM_COLUMNS)
    accepted: list[ClaimRecord] = []
    rejected: list[Rejection] = []
    for i, row in enumerate(reader):
        try:
            if None in row:
                raise _RowError(Reason.UNPARSEABLE, "too many fields")
            pid = _get(row, "policy_id")
            amount = _number(row, "amount")
            if amount <= 0:
                raise _RowError(Reason.NONPOSITIVE_AMOUNT, f"amount {amount} <= 0")
            if policy_ids is not None and pid not in policy_ids:
                raise _RowError(Reason.UNKNOWN_POLICY, f"no policy {pid!r}")
            accepted.append(ClaimRecord(pid, amount))
        except _RowError as exc:
            rejected.append(Rejection(i, exc.reason, exc.detail))
    return accepted, rejected


def band_policy(record: PolicyRecord, scheme: Scheme) -> RatingFactors:
    return scheme.band(record.field_values)


def rejection_summary(rejections: list[Rejection]) -> str:
    if not rejections:
        return "no rows rejected"
    counts = Counter(r.reason.value for r in rejections)
    parts = ", ".join(f"{k}: {v}" for k, v in sorted(counts.items()))
    return f"{len(rejections)} rows rejected ({parts})"


def read_policies(path, scheme: Scheme | None = None):
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_policies(fh, scheme)


def read_claims(path, policy_ids: set[str] | None = None):
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_claims(fh, policy_ids)
