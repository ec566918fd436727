import sys
from pathlib import Path

# helper modules (oracles, gradcheck) live next to the tests
sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
