def pytest_terminal_summary(terminalreporter):
    """One verdict line per acceptance criterion, taken from ``record_property``."""
    verdicts = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props or rep.when not in ("call", "setup"):
                continue
            ok = outcome == "passed" and verdicts.get(props["criterion"], (True,))[0]
            verdicts[props["criterion"]] = (ok, props.get("detail", ""))
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(verdicts, key=lambda c: int(c.split(".")[0])):
        ok, detail = verdicts[crit]
        line = f"{'PASS' if ok else 'FAIL'}  {crit}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
