import pytest

# criterion name -> list of per-test outcomes, in collection order
_CRITERIA: dict[str, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


def pytest_collection_finish(session):
    for item in session.items:
        marker = item.get_closest_marker("criterion")
        if marker:
            item.user_properties.append(("criterion", marker.args[0]))
            _CRITERIA.setdefault(marker.args[0], [])


def pytest_runtest_logreport(report):
    name = dict(report.user_properties).get("criterion")
    if not name:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _CRITERIA[name].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _CRITERIA.items():
        if not outcomes:
            status = "NOT RUN"
        else:
            status = "PASS" if all(outcomes) else "FAIL"
        terminalreporter.write_line(f"{status:7s} {name}  ({sum(outcomes)}/{len(outcomes)} checks)")
