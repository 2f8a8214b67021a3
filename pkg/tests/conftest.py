from helpers import ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, elapsed, detail = ACCEPTANCE[n]
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {name} ({elapsed:.2f}s)"
        terminalreporter.write_line(line + (f"  {detail}" if detail else ""))
