import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for rec in sorted(results, key=lambda r: r["n"]):
        status = "PASS" if rec["ok"] else "FAIL"
        terminalreporter.write_line(
            f"criterion {rec['n']:>2}: {status}  {rec['title']}  ({rec['seconds']:.1f} s) {rec['detail']}"
        )
