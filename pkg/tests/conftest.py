import numpy as np
import pytest

from relrisk.data import bundled_titanic_path, load_csv, titanic_schema


@pytest.fixture(scope="session")
def titanic_cat():
    return load_csv(bundled_titanic_path(), titanic_schema("categorical"))


@pytest.fixture(scope="session")
def titanic_cont():
    return load_csv(bundled_titanic_path(), titanic_schema("continuous"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)



def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[criterion]
        failed = [label for label, ok, _ in checks if not ok]
        status = "FAIL" if failed else "PASS"
        extra = f" (failed: {', '.join(failed)})" if failed else ""
        tr.write_line(f"criterion {criterion}: {status} [{len(checks) - len(failed)}/{len(checks)} checks]{extra}")
