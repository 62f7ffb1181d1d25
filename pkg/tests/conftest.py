import sys

import numpy as np
import pytest

from ratemaking.bands import RatingFactors, load_scheme
from ratemaking.design import RatingData, build_design, parse_formula


@pytest.fixture(scope="session")
def scheme():
    return load_scheme()


def toy_levels(**dims):
    """Level specs for ad-hoc nominal dimensions: toy_levels(x=["a", "b"]) -> reference "a"."""
    return {d: {"levels": list(lv), "reference": lv[0], "ordered": False} for d, lv in dims.items()}


def toy_design(formula, factors, y, exposure=None, levels=None):
    f = parse_formula(formula)
    data = RatingData([RatingFactors(r) for r in factors], np.asarray(y, float),
                      None if exposure is None else np.asarray(exposure, float))
    return build_design(data, f, levels)


def two_factor_sample(rng, n, effects_a=(0.0, 0.4, -0.3), effects_b=(0.0, 0.25), base=-1.0):
    """Factors x in {a,b,c}, z in {u,v}; returns factors, log-mean and exposures."""
    xa = rng.integers(0, 3, n)
    zb = rng.integers(0, 2, n)
    eta = base + np.asarray(effects_a)[xa] + np.asarray(effects_b)[zb]
    factors = [{"x": "abc"[i], "z": "uv"[j]} for i, j in zip(xa, zb)]
    return factors, eta, rng.uniform(0.2, 1.0, n)


TWO_LEVELS = toy_levels(x="abc", z="uv")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
