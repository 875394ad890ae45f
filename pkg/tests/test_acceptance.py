"""Acceptance criteria A1-A10 at their documented tolerances.

The checks run once per session in a process pool (``MAGNETOHOM_ACCEPTANCE_WORKERS``,
default: the CPU count, at most 5); each test prints its verdict line.
"""
import os
from concurrent.futures import ProcessPoolExecutor

import pytest

from magnetohom.harness.acceptance import CHECKS, Verdict

IDS = sorted(CHECKS, key=lambda c: int(c[1:]))


def _run(cid):
    return CHECKS[cid]().to_dict()


@pytest.fixture(scope="module")
def verdicts():
    workers = int(os.environ.get("MAGNETOHOM_ACCEPTANCE_WORKERS", min(5, os.cpu_count() or 1)))
    if workers <= 1:
        return {c: _run(c) for c in IDS}
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return dict(zip(IDS, ex.map(_run, IDS)))


@pytest.mark.slow
@pytest.mark.parametrize("cid", IDS)
def test_criterion(cid, verdicts, capsys):
    d = verdicts[cid]
    v = Verdict(**{k: d[k] for k in ("id", "title", "passed", "value", "threshold", "flags", "elapsed")})
    with capsys.disabled():
        print("\n" + v.line())
    assert v.passed, v.line()
