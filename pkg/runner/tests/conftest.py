ACCEPTANCE_MODULE = "test_acceptance"


def pytest_runtest_logreport(report):
    """Print one pass/fail line per acceptance criterion."""
    if report.when != "call":
        return
    module = report.nodeid.split("::", 1)[0]
    if ACCEPTANCE_MODULE not in module:
        return
    name = report.nodeid.split("::")[-1]
    outcome = "PASS" if report.passed else "FAIL"
    print(f"\n[acceptance] {name}: {outcome}", flush=True)
