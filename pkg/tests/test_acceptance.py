"""Acceptance suite: one test and one PASS/FAIL line per criterion.

The full suite runs once per session (about 40 minutes on one core). Set
``LASTEXIT_ACCEPT_SCALE`` below 1 for a quick run with fewer replications
and proportionally widened Monte Carlo tolerances. Run this file directly
to print the lines without pytest.
"""

import os
import sys

import pytest

from lastexit.acceptance import Settings, render_body, run_suite

CRITERIA = list(range(1, 14))


def _settings() -> Settings:
    return Settings(scale=float(os.environ.get("LASTEXIT_ACCEPT_SCALE", "1.0")))


def _line(k, rows) -> str:
    ok = bool(rows) and all(r.passed for r in rows)
    fails = [r.quantity for r in rows if not r.passed]
    detail = f"{sum(r.passed for r in rows)}/{len(rows)} rows"
    if fails:
        detail += "; failing: " + "; ".join(fails)
    return f"criterion {k:2d}: {'PASS' if ok else 'FAIL'} ({detail})"


@pytest.fixture(scope="session")
def suite_rows():
    return run_suite(_settings())


@pytest.mark.parametrize("k", CRITERIA)
def test_criterion(k, suite_rows, capsys):
    rows = [r for r in suite_rows if r.criterion == k]
    with capsys.disabled():
        print("\n" + _line(k, rows))
        for r in rows:
            print("    " + " | ".join(r.cells()))
    assert rows
    assert all(r.passed for r in rows)


if __name__ == "__main__":
    rows = run_suite(_settings(), progress=lambda s: print(s, file=sys.stderr, flush=True))
    for k in CRITERIA:
        print(_line(k, [r for r in rows if r.criterion == k]))
    print(render_body(rows))
    sys.exit(0 if all(r.passed for r in rows) else 1)
