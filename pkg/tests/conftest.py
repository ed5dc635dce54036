import re


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if not m or (rep.when != "call" and outcome != "error"):
                continue
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((int(m.group(1)), f"criterion {int(m.group(1)):2d}: {'PASS' if outcome == 'passed' else 'FAIL'}"
                                            f"  {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
