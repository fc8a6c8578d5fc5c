import numpy as np
import pytest

from qhelearn.simulator import CNOT, Gate


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    if call.when == "call" and item.get_closest_marker("acceptance"):
        detail = dict(item.user_properties).get("detail", "")
        verdict = "PASS" if report.passed else "FAIL"
        item.config.stash[_ACCEPTANCE].append(f"{verdict} {item.name}: {detail}")
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(record_property):
    """Record the measured quantities, then assert every named check."""

    def check(detail, **checks):
        failed = [name for name, ok in checks.items() if not ok]
        record_property("detail", detail + (f" [failed: {', '.join(failed)}]" if failed else ""))
        assert not failed, detail

    return check


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_circuit(n, depth, rng, kinds=("H", "S", "T", "X", "Z", "RZ", "RY", "CNOT")):
    """Random gate list over ``kinds``; CNOT is dropped for one qubit."""
    kinds = [k for k in kinds if n > 1 or k != "CNOT"]
    gates = []
    for _ in range(depth):
        kind = kinds[rng.integers(len(kinds))]
        if kind == "CNOT":
            c, t = rng.choice(n, size=2, replace=False)
            gates.append(CNOT(int(c), int(t)))
        elif kind in ("RZ", "RY"):
            gates.append(Gate(kind, (int(rng.integers(n)),), theta=float(rng.uniform(-np.pi, np.pi))))
        else:
            gates.append(Gate(kind, (int(rng.integers(n)),)))
    return gates
