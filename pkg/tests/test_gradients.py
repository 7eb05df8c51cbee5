import pytest

from glinpaint.checks import CASES, MODULES, run_case, run_checks


@pytest.mark.parametrize("case", CASES, ids=[f"{c.module}-{c.name}" for c in CASES])
def test_analytic_gradient_matches_finite_differences(case):
    res = run_case(case)
    assert res.passed, f"{case.module}.{case.name}: max rel err {max(res.errors):.2e} >= {case.tol:g}"


def test_every_module_has_checks():
    assert set(MODULES) >= {"tensor", "gle", "pconv", "attention", "iterative", "reinpaint", "losses", "e2e"}
    with pytest.raises(ValueError):
        run_checks("nope")
