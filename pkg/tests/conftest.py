import numpy as np
import pytest

from egcm.flows import Endpoint, FlowRecord, generate_synthetic, remap_ips


def make_record(src, dst, feats, label=0):
    """Build a FlowRecord from ("ip", port) tuples."""
    return FlowRecord(Endpoint(*src), Endpoint(*dst), np.asarray(feats, dtype=float), label)


@pytest.fixture
def tiny_records():
    """Five flows over four endpoints, two of them attacks."""
    a, b, c, d = ("10.0.0.1", 1000), ("10.0.0.2", 80), ("10.0.0.3", 2000), ("10.0.0.4", 443)
    return [
        make_record(a, b, [1.0, 2.0], 0),
        make_record(c, b, [3.0, 0.0], 1),
        make_record(a, d, [0.5, 0.5], 0),
        make_record(c, d, [2.0, 1.0], 1),
        make_record(a, b, [1.5, 2.5], 0),
    ]


@pytest.fixture(scope="session")
def synthetic_flows():
    recs = generate_synthetic(600, 600, 0.1, 6.0, feature_dim=4, seed=3)
    return remap_ips(recs, seed=3)


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE[key])
