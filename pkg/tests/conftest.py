import numpy as np
import pytest

_ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(cid, text): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        cid, text = marker.args
        _ACCEPTANCE.append((cid, "PASS" if rep.passed else "FAIL", text))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    # One line per criterion; a criterion checked by several tests fails if any of them does.
    merged: dict[str, tuple[str, str]] = {}
    for cid, status, text in _ACCEPTANCE:
        prev = merged.get(cid, ("PASS", text))[0]
        merged[cid] = ("FAIL" if "FAIL" in (prev, status) else "PASS", text)
    terminalreporter.section("acceptance criteria")
    for cid in sorted(merged, key=int):
        status, text = merged[cid]
        terminalreporter.write_line(f"[{status}] AC{cid}: {text}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
