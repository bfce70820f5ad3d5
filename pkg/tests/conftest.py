import pytest

from mspem.simlab import ScenarioSpec, run_scenarios, table3_scenarios

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def table3_report():
    """Desk-scale Monte Carlo: four scenarios, N=500, T=80, 50 replications."""
    return run_scenarios(table3_scenarios(replications=50))


@pytest.fixture(scope="session")
def recurrent_report():
    spec = ScenarioSpec(name="StrongRecurrent", recurrent=True, replications=50)
    return run_scenarios([spec], estimators=("naive", "ipw_observed"))


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line; the lines are echoed again after the run."""
    log = request.config.stash.setdefault(_VERDICTS, [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        log.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[-1])):
            terminalreporter.write_line(line)


def pytest_collection_modifyitems(config, items):
    # anything touching the Monte Carlo fixtures is slow; deselect with -m "not slow"
    for item in items:
        if {"table3_report", "recurrent_report"} & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)
