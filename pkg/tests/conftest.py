ACCEPTANCE: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None or not (report.when == "call" or report.failed):
        return
    num, title = crit
    entry = ACCEPTANCE.setdefault(num, {"status": "PASS", "title": title, "details": []})
    if report.failed:
        entry["status"] = "FAIL"
    # the measured values each criterion prints, e.g. "[PASS] criterion 5: loss median ..."
    for line in report.capstdout.splitlines():
        if line.startswith(("[PASS] criterion", "[FAIL] criterion")):
            entry["details"].append(line.split(": ", 1)[1])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        e = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{e['status']}] criterion {num:>2}: {e['title']}")
        for d in e["details"]:
            terminalreporter.write_line(f"      {d}")
