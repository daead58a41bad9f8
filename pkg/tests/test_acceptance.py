"""Acceptance criteria at full scale: one PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -s`` to see the lines, or ``wflow check``.
"""
import pytest

from wflow.checks import ALL_CHECKS, check_arratia

CRITERIA = {**ALL_CHECKS, "A": check_arratia}


@pytest.mark.parametrize("key", list(CRITERIA))
def test_criterion(key, capsys):
    res = CRITERIA[key]()
    with capsys.disabled():
        print("\n" + res.line())
    assert res.passed, res.line()
