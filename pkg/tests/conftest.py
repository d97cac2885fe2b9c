import pytest

# criterion number -> list of (part, passed, detail), filled by the acceptance tests
ACCEPTANCE = {}


def record(criterion, part, passed, detail):
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(passed), detail))


def acceptance_lines():
    lines = []
    for crit in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[crit]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{name}: {'ok' if good else 'FAIL'} ({info})"
                           for name, good, info in parts)
        lines.append(f"criterion {crit}: {'PASS' if ok else 'FAIL'} - {detail}")
    return lines


@pytest.fixture
def acceptance_record():
    return record


def pytest_terminal_summary(terminalreporter):
    lines = acceptance_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
