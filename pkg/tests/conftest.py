from collections import defaultdict

import pytest

from ptr_rational.model import ConsumerParams, ProgramParams, UncertaintyModel

_ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = defaultdict(list)
_TITLES: dict[int, str] = {}


@pytest.fixture
def cp():
    return ConsumerParams()


@pytest.fixture
def um25():
    return UncertaintyModel.from_percent(25, 8.0)


@pytest.fixture
def pp():
    def make(p2, call=1.0):
        return ProgramParams(p2, call)

    return make


@pytest.fixture
def criterion():
    """Record a named sub-check of an acceptance criterion; printed in the terminal summary."""

    def record(number: int, title: str, check: str, ok: bool, detail: str = ""):
        _TITLES[number] = title
        _ACCEPTANCE[number].append((check, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        checks = _ACCEPTANCE[number]
        status = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        tr.write_line(f"criterion {number} [{status}] {_TITLES[number]}")
        for check, ok, detail in checks:
            tr.write_line(f"    {'pass' if ok else 'FAIL'}  {check}" + (f"  ({detail})" if detail else ""))
