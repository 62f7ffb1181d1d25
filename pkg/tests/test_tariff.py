import json
import math
from dataclasses import replace
from importlib import resources

import numpy as np
import pytest

from ratemaking.bands import UnknownLevelError
from ratemaking.families import Gamma, Poisson
from ratemaking.glm import fit, model_from_dict
from ratemaking.tariff import (NOTE_NO_INTERACTION, TariffError, TariffExclusionError, build_tariff, load_tariff,
                               quote, save_tariff, tariff_text, tariff_to_dict)

from conftest import toy_design, toy_levels

TABLE10 = {
    "age": {"E1": 1.349, "E2": 1.178, "E3": 1.069, "E4": 1.000, "E5": 0.867, "E6": 0.721},
    "model:region": {
        "M1:R1": 1.195, "M1:R2": 1.162, "M1:R3": 0.814, "M2:R1": 1.201, "M2:R2": 1.000, "M2:R3": 0.737,
        "M3:R1": 1.094, "M3:R2": 0.771, "M3:R3": 0.703, "M4:R1": 0.986, "M4:R2": 0.718, "M4:R3": 0.580,
        "M5:R1": 1.004, "M5:R2": 0.621, "M5:R3": 0.576, "M6:R1": 0.863, "M6:R2": 0.547, "M6:R3": 0.487,
        "M7:R1": 0.646, "M7:R2": 0.393, "M7:R3": 0.346,
    },
    "value": {"V1": 0.605, "V2": 0.901, "V3": 1.000, "V4": 1.013},
    "gender": {"F": 0.915, "M": 1.000},
    "make:class": {
        "B1:C1": 1.000, "B1:C2": 1.440, "B1:C3": 1.652, "B2:C1": 1.197, "B2:C2": 1.513, "B2:C3": 1.754,
        "B3:C1": 1.116, "B3:C2": 1.237, "B3:C3": 1.066, "B5:C1": 0.776, "B5:C2": 1.248, "B5:C3": 1.282,
    },
}
BASE = {"age": "E4", "model": "M2", "region": "R2", "value": "V3", "gender": "M", "make": "B1", "class": "C1"}
WORKED = {"age": "E1", "model": "M5", "region": "R2", "value": "V3", "gender": "M", "make": "B2", "class": "C2"}


def fixture(name):
    return model_from_dict(json.loads(resources.files("ratemaking").joinpath("data", name).read_text("utf-8")))


@pytest.fixture(scope="module")
def table():
    return build_tariff(fixture("table6_frequency.json"), fixture("table9_severity.json"))


# ---------------------------------------------------------------- published table

@pytest.mark.parametrize("group, level, expected", [(g, lv, f) for g, d in TABLE10.items() for lv, f in d.items()])
def test_table10_entries(table, group, level, expected):
    assert table.group(group).factors[level] == pytest.approx(expected, abs=0.002)


def test_base_premium(table):
    assert table.base_frequency == pytest.approx(0.143, abs=5e-4)
    assert table.base_severity == pytest.approx(6.649, abs=5e-4)
    assert table.base_premium == pytest.approx(0.951, abs=0.001)
    assert table.base_class == BASE


def test_base_levels_have_unit_factor(table):
    for g in table.groups:
        key = ":".join(BASE[d] for d in g.dimensions)
        assert g.factors[key] == 1.0
        assert all(f > 0 for f in g.factors.values())


def test_aliased_cell_note_and_excluded_make(table):
    g = table.group("make:class")
    assert g.notes == {"B5:C3": NOTE_NO_INTERACTION}
    assert not any(k.startswith("B4") for k in g.factors)
    assert table.excluded("make", "B4") is not None


# ---------------------------------------------------------------- quoting

def test_worked_example_quote(table):
    q = quote(table, WORKED)
    assert q.premium == pytest.approx(1.206, abs=0.002)
    applied = {k: f for k, _, f in q.applied}
    assert applied["age"] == pytest.approx(1.349, abs=0.002)
    assert applied["model:region"] == pytest.approx(0.621, abs=0.002)
    assert applied["make:class"] == pytest.approx(1.513, abs=0.002)


def test_base_class_quote_equals_base_premium(table):
    assert quote(table, BASE).premium == table.base_premium


def test_single_factor_ratio_is_exact(table):
    base = quote(table, BASE).premium
    for g in table.groups:
        for key, f in g.factors.items():
            req = dict(BASE)
            req.update(zip(g.dimensions, key.split(":")))
            assert quote(table, req).premium / base == pytest.approx(f, rel=1e-14)


def test_exposure_linearity_and_conversion(table):
    one = quote(table, WORKED)
    two = quote(table, WORKED, exposure=2.0)
    assert two.premium == pytest.approx(2 * one.premium, rel=1e-15)
    conv = quote(table, WORKED, conversion=0.433)
    assert conv.premium == pytest.approx(one.premium * 0.433, rel=1e-15)
    assert conv.premium_smmlv == one.premium


def test_quote_errors(table):
    with pytest.raises(TariffExclusionError):
        quote(table, {**BASE, "make": "B4"})
    with pytest.raises(UnknownLevelError):
        quote(table, {**BASE, "age": "E9"})
    with pytest.raises(UnknownLevelError):
        quote(table, {k: v for k, v in BASE.items() if k != "gender"})
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            quote(table, BASE, exposure=bad)
        with pytest.raises(ValueError):
            quote(table, BASE, conversion=bad)


def test_note_reported_on_aliased_cell(table):
    q = quote(table, {**BASE, "make": "B5", "class": "C3"})
    assert any(NOTE_NO_INTERACTION in n for n in q.notes)


# ---------------------------------------------------------------- build checks

def _toy_models(scale=1.0, seed=0):
    rng = np.random.default_rng(seed)
    n = 4000
    x = rng.integers(0, 3, n)
    e = rng.uniform(0.2, 1.0, n)
    y = rng.poisson(e * np.exp(-1.0 + np.array([0.0, 0.3, -0.4])[x]))
    freq = fit(toy_design("count ~ x", [{"x": "abc"[i]} for i in x], y, scale * e, toy_levels(x="abc")), Poisson())
    s = rng.integers(0, 2, 500)
    amt = rng.gamma(2.0, np.exp(1.0 + 0.5 * s) / 2.0)
    sev = fit(toy_design("a ~ s", [{"s": "uv"[i]} for i in s], amt, None, toy_levels(s="uv")), Gamma())
    return freq, sev


def test_exposure_rescaling_leaves_relativities():
    t1 = build_tariff(*_toy_models(1.0))
    t2 = build_tariff(*_toy_models(3.0))
    for k, f in t1.group("x").factors.items():
        assert t2.group("x").factors[k] == pytest.approx(f, rel=1e-9)
    assert t2.base_frequency == pytest.approx(t1.base_frequency / 3.0, rel=1e-9)


def test_build_rejects_shared_dimension_and_nonconvergence():
    freq, sev = _toy_models()
    with pytest.raises(TariffError):
        build_tariff(freq, freq)
    with pytest.raises(TariffError):
        build_tariff(replace(freq, converged=False), sev)


def test_build_rejects_non_log_link():
    freq, sev = _toy_models()
    ident = fit(sev.design, Gamma(), "identity")
    with pytest.raises(TariffError):
        build_tariff(freq, ident)


# ---------------------------------------------------------------- persistence

def test_round_trip(table, tmp_path):
    path = tmp_path / "t.json"
    save_tariff(table, path)
    back = load_tariff(str(path))
    assert back == table
    assert load_tariff(save_tariff(table)) == table
    assert save_tariff(back) == save_tariff(table)


def test_schema_keys(table):
    doc = tariff_to_dict(table)
    assert {"version", "base_premium_smmlv", "base_class", "factors", "joint_factors", "exclusions"} <= set(doc)
    assert set(doc["factors"]) == {"age", "value", "gender"}
    assert set(doc["joint_factors"]) == {"model:region", "make:class"}


@pytest.mark.parametrize("tamper", [
    lambda d: d["factors"]["age"].__setitem__("E1", 0.0),
    lambda d: d["factors"]["age"].__setitem__("E1", -1.2),
    lambda d: d["joint_factors"]["make:class"].__setitem__("B2:C2", "big"),
    lambda d: d["factors"]["age"].pop("E4"),
    lambda d: d["factors"]["age"].__setitem__("E4", 1.1),
    lambda d: d["base_class"].pop("gender"),
    lambda d: d.__setitem__("version", 99),
    lambda d: d.pop("factors"),
    lambda d: d.__setitem__("base_premium_smmlv", math.nan),
])
def test_load_rejects_tampered_documents(table, tamper):
    doc = json.loads(save_tariff(table))
    tamper(doc)
    with pytest.raises(TariffError):
        load_tariff(doc)


def test_load_rejects_bad_json():
    with pytest.raises(TariffError):
        load_tariff("{not json")


def test_text_rendering(table):
    text = tariff_text(table)
    assert "0.951" in text and "1.513" in text and "B4" in text
