import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from gader import synth  # noqa: E402


@pytest.fixture(scope="session")
def walker():
    return synth.sample_identity(0, np.random.default_rng(3))


@pytest.fixture(scope="session")
def walker_cadence20():
    w = synth.sample_identity(1, np.random.default_rng(4))
    return synth.WalkerIdentity(**{**w.__dict__, "cadence": 20})


@pytest.fixture(scope="session")
def tiny_corpus():
    """Four identities, every class present; in memory."""
    return synth.generate_corpus(4, 3, seed=11, styles=("probe", "wsw", "mixed"))


ACCEPTANCE = {}


@pytest.fixture
def accept():
    """Record one acceptance line; the caller still asserts."""
    def record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
