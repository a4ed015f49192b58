import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (status, detail); filled by the acceptance tests
CRITERIA = {}


def record(number, passed, detail):
    status = "PASS" if passed else "FAIL"
    print(f"criterion {number:2d}: {status} - {detail}")
    prev = CRITERIA.get(number)
    if prev is not None:
        # a criterion with several checks fails if any part fails
        status = "FAIL" if "FAIL" in (status, prev[0]) else "PASS"
        detail = f"{prev[1]}; {detail}"
    CRITERIA[number] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        status, detail = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:2d}: {status} - {detail}")


@pytest.fixture(scope="session")
def reference16():
    from ghostkin.hilbert import build_reference
    return build_reference(16, 7.5, threads=4)


@pytest.fixture(scope="session")
def interior16(reference16):
    from ghostkin.hilbert import HilbertSetup, prepare_from_setup
    return prepare_from_setup(HilbertSetup(nx=16, nz=16, threads=4), reference16)
