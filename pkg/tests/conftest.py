import re

CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = CRITERION.search(getattr(rep, "nodeid", ""))
            if not m or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            detail = dict(rep.user_properties).get("detail", "")
            status = "PASS" if outcome == "passed" else "FAIL"
            lines[int(m.group(1))] = f"criterion {m.group(1)} [{status}] {m.group(2).replace('_', ' ')}  {detail}".rstrip()
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
