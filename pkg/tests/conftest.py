from pathlib import Path

import pytest

import neggen
from neggen.grounding import load_dataset

FIXTURE = Path(neggen.__file__).parent / "data" / "fixture"


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return FIXTURE


@pytest.fixture(scope="session")
def fixture_samples():
    return load_dataset(FIXTURE / "samples.jsonl")


@pytest.fixture(scope="session")
def substitutions():
    from neggen.negtext import load_substitutions
    return load_substitutions(FIXTURE / "substitutions.json")


# ------------------------------------------------------------------ acceptance reporting

_CRITERIA: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    ok = rep.passed and _CRITERIA.get(n, (title, True))[1]
    _CRITERIA[n] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {n:>2}. {title}")
