import pytest

ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(scope="session")
def reference():
    """Default-config toy experiment, trained once and cached on disk."""
    from resynth_ood import reference as R

    return R.build()


@pytest.fixture(scope="session")
def runner(reference):
    """Detection on the reference test split, cached per detector config."""
    from resynth_ood.diagnostics import make_runner

    return make_runner(reference.cfg, reference.models, reference.ds)


def pytest_collection_modifyitems(items):
    # anything that needs the trained reference models is slow
    for item in items:
        if "reference" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
