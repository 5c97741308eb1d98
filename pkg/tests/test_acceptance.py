"""Acceptance suite: one test per criterion, with printed PASS/FAIL lines.

Each criterion's tolerances and Monte Carlo sizes are pinned inside
``slq.verify``; this module only asserts the outcomes.  The Monte Carlo
criteria run at full scale (10^5 paths), so this file takes a few minutes.
Stated runtime budgets are printed for inspection rather than asserted,
since wall-clock limits depend on the host.
"""

import time

import pytest

from slq import verify

BUDGET_SECONDS = {1: 1, 2: 1, 3: 1, 4: 3, 5: 90, 6: 10, 7: 60, 8: 30, 9: 60, 10: 5}


@pytest.mark.parametrize("cid", sorted(verify.CRITERIA))
def test_criterion(cid):
    start = time.perf_counter()
    result = verify.run_criterion(cid)
    elapsed = time.perf_counter() - start
    for line in result.lines():
        print(line)
    print(f"  elapsed {elapsed:.2f}s (budget ~{BUDGET_SECONDS[cid]}s)")
    failing = [f"{label}: {detail}" for label, ok, detail in result.checks if not ok]
    assert result.passed, (
        f"criterion {cid} ({result.name}) failed sub-checks:\n  " + "\n  ".join(failing)
    )
