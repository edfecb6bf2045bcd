import pytest

# criterion number -> {"ok": bool, "details": [str]}
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"ok": True, "details": []})
    entry["ok"] &= rep.passed
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]
    if rep.failed and rep.when != "call":
        entry["details"].append(f"{item.name} failed during {rep.when}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"CRITERION {n}: {status}  " + "; ".join(e["details"]))


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement to the criterion summary."""
    def add(text):
        record_property("detail", text)
        print(text)
    return add
