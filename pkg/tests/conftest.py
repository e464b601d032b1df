from typing import Dict, Tuple

import pytest

# criterion number -> (passed or None for informational, one-line detail)
ACCEPTANCE: Dict[int, Tuple[object, str]] = {}


@pytest.fixture
def acceptance():
    def record(n: int, passed, detail: str) -> None:
        ACCEPTANCE[n] = (passed, detail)
        status = "INFO" if passed is None else ("PASS" if passed else "FAIL")
        print(f"criterion {n}: {status}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        status = "INFO" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
