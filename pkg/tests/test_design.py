import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ratemaking.bands import RatingFactors, UnknownLevelError
from ratemaking.design import (DesignError, FormulaError, RatingData, aggregate_cells, build_design, column_label,
                               parse_formula, parse_label)

from conftest import toy_design, toy_levels


def test_parse_formula():
    f = parse_formula("count ~ model + region + age + model:region")
    assert f.mains == ("model", "region", "age") and f.interactions == (("model", "region"),)
    assert f.offset and f.role == "frequency"
    assert str(f) == "count ~ model + region + age + model:region"
    s = parse_formula("amount ~ value + make")
    assert not s.offset and s.role == "severity"
    assert parse_formula("amount ~ 1").mains == ()


@pytest.mark.parametrize("text", ["count model", "count ~ a + a", "count ~ a:b", "count ~ a + b + a:b + b:a",
                                  "count ~ a +", "2x ~ a", "count ~ a-b"])
def test_formula_errors(text):
    with pytest.raises(FormulaError):
        parse_formula(text)


def test_labels_round_trip():
    term = (("model", "M1"), ("region", "R3"))
    assert parse_label(column_label(term)) == term
    assert column_label(()) == "(Intercept)" and parse_label("(Intercept)") == ()


def test_two_binary_dimensions_with_interaction():
    levels = toy_levels(a="01", b="01")
    rows = [{"a": a, "b": b} for a in "01" for b in "01"]
    d = toy_design("amount ~ a + b + a:b", rows, [1, 2, 3, 4], levels=levels)
    assert d.labels == ("(Intercept)", "a:1", "b:1", "a:1×b:1")
    assert d.p == 4
    assert np.array_equal(d.X[:, 3], d.X[:, 1] * d.X[:, 2])
    assert np.all(d.offset == 0)


def test_column_count_formula(scheme):
    rng = np.random.default_rng(0)
    dims = {"model": scheme["model"].levels, "region": scheme["region"].levels, "age": scheme["age"].levels}
    # every combination at least once, plus random filler
    rows = [{"model": m, "region": r, "age": a} for m in dims["model"] for r in dims["region"] for a in dims["age"]]
    rows += [{k: v[rng.integers(len(v))] for k, v in dims.items()} for _ in range(200)]
    data = RatingData([RatingFactors(r) for r in rows], np.ones(len(rows)), np.ones(len(rows)))
    d = build_design(data, parse_formula("count ~ model + region + age + model:region"), scheme)
    assert d.p == 1 + 6 + 2 + 5 + 12 == 26
    assert d.aliased == ()
    assert len(aggregate_cells(data, ["model", "region", "age"])) == 126


def test_severity_final_design_has_16_columns(scheme):
    rows = [{"value": v, "gender": g, "make": m, "class": c}
            for v in scheme["value"].levels for g in "MF" for m in ("B1", "B2", "B3", "B5")
            for c in scheme["class"].levels]
    data = RatingData([RatingFactors(r) for r in rows], np.ones(len(rows)))
    d = build_design(data, parse_formula("amount ~ value + gender + make + class + make:class"), scheme)
    # make B4 is unobserved: its main and interaction columns are aliased
    assert d.p == 16
    assert d.aliased == ("make:B4", "make:B4×class:C2", "make:B4×class:C3")


def test_unseen_level_and_underdetermined():
    levels = toy_levels(x="ab")
    with pytest.raises(UnknownLevelError, match="'c'"):
        toy_design("amount ~ x", [{"x": "a"}, {"x": "c"}], [1, 2], levels=levels)
    with pytest.raises(DesignError, match="n=1 < p=2"):
        toy_design("amount ~ x", [{"x": "b"}], [1], levels=levels)


def test_offset_needs_exposure():
    with pytest.raises(DesignError):
        toy_design("count ~ x", [{"x": "a"}, {"x": "b"}], [0, 1], levels=toy_levels(x="ab"))
    d = toy_design("count ~ x", [{"x": "a"}, {"x": "b"}], [0, 1], exposure=[0.5, 2.0], levels=toy_levels(x="ab"))
    assert np.allclose(d.offset, np.log([0.5, 2.0]))


def test_aggregate_cells_examples():
    data = RatingData([RatingFactors(x="a"), RatingFactors(x="a")], np.array([0.0, 2.0]), np.array([1.0, 1.0]))
    (cell,) = aggregate_cells(data, ["x"])
    assert (cell.exposure, cell.claims, cell.policies) == (2.0, 2.0, 2)
    with pytest.raises(DesignError):
        aggregate_cells(data, [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.integers(0, 4), st.floats(0.0, 2.0)), min_size=1, max_size=40))
def test_aggregation_conservation(rows):
    data = RatingData([RatingFactors(x=x) for x, _, _ in rows], np.array([float(y) for _, y, _ in rows]),
                      np.array([e for _, _, e in rows]))
    cells = aggregate_cells(data, ["x"])
    assert len(cells) <= 3
    assert sum(c.exposure for c in cells) == pytest.approx(float(np.sum(data.exposure)))
    kept = {c.levels["x"] for c in cells}
    assert sum(c.claims for c in cells) == sum(y for x, y, _ in rows if x in kept)
    assert all(c.exposure > 0 for c in cells)
