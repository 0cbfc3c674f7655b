"""Collects acceptance-criterion verdicts and prints them after the run."""

from __future__ import annotations

ACCEPTANCE: dict[int, tuple[str, bool, float, str]] = {}


def record(number: int, title: str, passed: bool, seconds: float, detail: str) -> None:
    ACCEPTANCE[number] = (title, passed, seconds, detail)
    line = f"CRITERION {number:2d} {'PASS' if passed else 'FAIL'} [{seconds:6.1f}s] {title}: {detail}"
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, seconds, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"CRITERION {n:2d} {'PASS' if passed else 'FAIL'} [{seconds:6.1f}s] {title}: {detail}")
    passed = sum(1 for v in ACCEPTANCE.values() if v[1])
    terminalreporter.write_line(f"{passed}/{len(ACCEPTANCE)} criteria met")
