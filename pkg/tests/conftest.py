import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one acceptance criterion; its outcome is summarized")
    config.stash[_LINES] = []


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None and (report.when == "call" or report.failed or report.skipped):
        number, title = marker.args
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        lines = item.config.stash[_LINES]
        if not any(n == number for n, _ in lines):
            lines.append((number, f"criterion {number} {status}: {title}" + (f" ({detail})" if detail else "")))
    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_LINES]
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
