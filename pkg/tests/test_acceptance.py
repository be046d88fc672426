"""The ten reference-case criteria, one test each.

Every criterion prints a single ``ACCEPTANCE n PASS|FAIL`` line (collected
and echoed in the terminal summary, so it shows with or without ``-s``).
"""

import pytest

from mcopf import regression

RESULTS: list[str] = []


@pytest.mark.parametrize("fn", regression.CHECKS, ids=[f.__name__ for f in regression.CHECKS])
def test_criterion(ctx, fn):
    c = regression.run_check(fn, ctx)
    line = f"ACCEPTANCE {c.number:>2} {'PASS' if c.passed else 'FAIL'}  {c.title} ({c.seconds:.1f}s)"
    RESULTS.append(line)
    print(line)
    assert c.passed, regression.format_table([c])


def test_criteria_cover_all_ten():
    assert [f.__name__ for f in regression.CHECKS] == [
        "check_newton", "check_kron", "check_svr2", "check_svr1", "check_swr2",
        "check_swr1", "check_geometry", "check_ablation", "check_invariants", "check_oracles",
    ]
