import pytest

# (criterion number, sub-label) -> (passed, detail); filled by test_acceptance
ACCEPTANCE_RESULTS = {}


def record_criterion(number, passed, detail=""):
    ACCEPTANCE_RESULTS[number] = (passed, detail)
    print(f"[criterion {number}] {'PASS' if passed else 'FAIL'} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=str):
        ok, detail = ACCEPTANCE_RESULTS[key]
        line = f"criterion {key}: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
