import pytest

from qtransfer.config import preset

ACCEPTANCE_LINES: dict[str, str] = {}


def record_criterion(key: str, ok: bool, detail: str) -> None:
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES[key] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")

    def order(k):
        num = "".join(ch for ch in k if ch.isdigit())
        return (int(num or 0), k)

    for k in sorted(ACCEPTANCE_LINES, key=order):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def fig2():
    return preset("fig2").params


@pytest.fixture(scope="session")
def fig3():
    return preset("fig3").params


@pytest.fixture(scope="session")
def alt083():
    return preset("alt_083").params
