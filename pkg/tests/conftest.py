from __future__ import annotations

import pytest

ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance line and fail the test when the criterion does not hold."""
    log = request.config.stash[ACCEPTANCE_KEY]

    def record(name: str, checks: dict, detail: str = ""):
        ok = all(bool(v) for v in checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"{name} {'PASS' if ok else 'FAIL'}  {detail}"
        if failed:
            line += f"  [failed: {', '.join(failed)}]"
        log[name] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE_KEY, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(log, key=lambda s: int(s[1:])):
        terminalreporter.write_line(log[name])
