from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wealth_atlas import io as wio  # noqa: E402
from wealth_atlas.synth import SynthConfig, generate  # noqa: E402


@pytest.fixture(scope="session")
def fixture_factory(tmp_path_factory):
    """Generate (and memoize) synthetic fixtures keyed by their config."""
    cache = {}

    def make(**kwargs):
        cfg = SynthConfig(**kwargs)
        if cfg not in cache:
            cache[cfg] = generate(cfg, tmp_path_factory.mktemp("synth"))
        return cache[cfg]

    return make


@pytest.fixture(scope="session")
def small_fixture(fixture_factory):
    return fixture_factory(n_townships=64, seed=11)


def square(tid: str, x0: float, y0: float, size: float = 1.0, county: str = "C1") -> wio.TownshipBoundary:
    ring = ((x0, y0), (x0 + size, y0), (x0 + size, y0 + size), (x0, y0 + size), (x0, y0))
    return wio.TownshipBoundary(tid, county, (ring,), wio.boundary_centroid([ring]))


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        name = props.get("criterion", report.nodeid.split("::")[-1])
        _ACCEPTANCE[name] = ("PASS" if report.passed else "FAIL", props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split()[0]) if n.split()[0].isdigit() else 99):
        status, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"criterion {name}: {status}  {detail}")
