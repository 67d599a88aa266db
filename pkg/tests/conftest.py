import numpy as np
import pytest

from bevmae.geometry import GridSpec, PointCloud


@pytest.fixture(scope="session")
def small_spec():
    """Origin-anchored grid: 0.1 m voxels, d=8 (0.8 m BEV cells), 4x4 BEV."""
    return GridSpec(0.0, 3.2, 0.0, 3.2, 0.0, 1.2, (0.1, 0.1, 0.1), 8)


@pytest.fixture(scope="session")
def default_spec():
    return GridSpec()


def random_cloud(rng, n, spec, margin=0.0):
    lo = spec.mins - margin
    hi = spec.maxs + margin
    xyz = rng.uniform(lo, hi, size=(n, 3))
    return PointCloud(xyz, rng.uniform(0, 1, n))


_ACCEPTANCE = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        _ACCEPTANCE[request.node.nodeid] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for nodeid in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[nodeid])


def pytest_runtest_logreport(report):
    if "test_acceptance" in report.nodeid and report.failed and report.nodeid not in _ACCEPTANCE:
        _ACCEPTANCE[report.nodeid] = f"FAIL  {report.nodeid.split('::')[-1]}: raised before a verdict"
