"""Shared fixtures.

Every call to ``qcqp.duality_gap`` made anywhere in the session is recorded so
the weak-duality acceptance check can look at all solved instances; that test
is moved to the end of the run. Acceptance checks log one verdict line each,
repeated in the terminal summary.
"""

import numpy as np
import pytest

from herwcal import qcqp

SOLVED = []
_original_gap = qcqp.duality_gap


def _recording_gap(Q, z, certificate, *args, **kwargs):
    out = _original_gap(Q, z, certificate, *args, **kwargs)
    SOLVED.append((float(z @ Q @ z), float(certificate.dual_value), float(certificate.min_eig_Z),
                   float(np.linalg.norm(Q, 2))))
    return out


qcqp.duality_gap = _recording_gap


def pytest_collection_modifyitems(config, items):
    last = [it for it in items if "weak_duality_over_suite" in it.name]
    rest = [it for it in items if "weak_duality_over_suite" not in it.name]
    items[:] = rest + last


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
