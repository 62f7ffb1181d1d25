import io

import pytest
from hypothesis import given, settings, strategies as st

from ratemaking.ingest import (CSVFormatError, Reason, band_policy, parse_claims, parse_policies,
                               rejection_summary)

HEADER = "policy_id,exposure,claim_count,class,make,model_year_offset,policy_class,region,gender,age,insured_value\n"
GOOD = "P1,1.0,0,automovil,chevrolet,2,individual,bogota,M,40,80\n"


def policies(*rows, header=HEADER):
    return parse_policies(io.StringIO(header + "".join(rows)))


def test_accepts_valid_row():
    ok, bad = policies(GOOD)
    assert bad == [] and len(ok) == 1
    assert ok[0].age == 40 and ok[0].insured_value == 80.0 and ok[0].vehicle_class == "automovil"


@pytest.mark.parametrize("row,reason", [
    ("P2,1.0,0,automovil,chevrolet,2,individual,bogota,M,15,80\n", Reason.BAD_AGE),
    ("P2,1.0,0,automovil,chevrolet,2,individual,bogota,M,101,80\n", Reason.BAD_AGE),
    ("P2,1.0,0,automovil,chevrolet,2,individual,bogota,M,40,0\n", Reason.NONPOSITIVE_VALUE),
    ("P2,1.0,0,automovil,chevrolet,2,individual,bogota,M,,80\n", Reason.MISSING_FIELD),
    ("P2,1.0,0,automovil,chevrolet,2,individual,bogota,M,forty,80\n", Reason.UNPARSEABLE),
    ("P2,0,0,automovil,chevrolet,2,individual,bogota,M,40,80\n", Reason.BAD_EXPOSURE),
    ("P2,1,-1,automovil,chevrolet,2,individual,bogota,M,40,80\n", Reason.BAD_CLAIM_COUNT),
])
def test_rejections(row, reason):
    ok, bad = policies(GOOD, row)
    assert len(ok) == 1 and [(r.row, r.reason) for r in bad] == [(1, reason)]


def test_model_year_column_checked():
    header = HEADER.rstrip("\n") + ",model_year\n"
    ok, bad = policies(GOOD.rstrip("\n") + ",2001\n", "P2,1,0,automovil,chevrolet,2,individual,bogota,M,40,80,1899\n",
                       header=header)
    assert len(ok) == 1 and bad[0].reason is Reason.BAD_MODEL_YEAR


def test_unknown_category_rejected_with_scheme(scheme):
    ok, bad = parse_policies(io.StringIO(HEADER + GOOD.replace("bogota", "atlantis")), scheme)
    assert ok == [] and bad[0].reason is Reason.UNPARSEABLE


def test_header_errors():
    with pytest.raises(CSVFormatError):
        parse_policies(io.StringIO(""))
    with pytest.raises(CSVFormatError, match="insured_value"):
        parse_policies(io.StringIO(HEADER.replace(",insured_value", "") + GOOD))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 120), st.floats(-10, 300, allow_nan=False), st.sampled_from(["1", "0", "x", ""])),
                max_size=30))
def test_accept_reject_totality(rows):
    lines = [f"P{i},{e or '1'},0,automovil,mazda,1,individual,antioquia,F,{a},{v}\n" for i, (a, v, e) in enumerate(rows)]
    ok, bad = policies(*lines)
    assert len(ok) + len(bad) == len(rows)
    assert len({r.row for r in bad}) == len(bad)
    assert all(16 <= p.age <= 100 and p.insured_value > 0 and p.exposure > 0 for p in ok)


def test_claims():
    ok, bad = parse_claims(io.StringIO("policy_id,amount\nP1,7.528\nP1,0\nP2,-1\nP9,3\n"), policy_ids={"P1", "P2"})
    assert [c.amount for c in ok] == [7.528]
    assert [r.reason for r in bad] == [Reason.NONPOSITIVE_AMOUNT, Reason.NONPOSITIVE_AMOUNT, Reason.UNKNOWN_POLICY]
    assert rejection_summary(bad) == "3 rows rejected (nonpositive_amount: 2, unknown_policy: 1)"


def test_band_policy(scheme):
    ok, _ = policies("P1,1,0,camioneta,renault,0,individual,valle_cauca_narino,F,26,50.0\n")
    f = band_policy(ok[0], scheme)
    assert (f["age"], f["model"], f["region"], f["freq_value"], f["sev_value"], f["make"], f["class"]) == \
        ("E2", "M2", "R3", "VF2", "VS3", "B2", "C2")
    assert band_policy(ok[0], scheme) == f
