from pathlib import Path

import numpy as np
import pytest

from sdgkit.data import SyntheticDomainConfig, export_wilds_layout, generate_synthetic_domains


def tiny_domains(per_domain: int = 10, seed: int = 0):
    return generate_synthetic_domains(SyntheticDomainConfig(samples_per_domain=max(per_domain, 10)), seed)


def write_fixture(root: Path, per_center: int, seed: int = 0) -> Path:
    """WILDS-layout directory with ``per_center`` patches for each of the five centres."""
    domains = [d.subset(np.arange(per_center)) for d in tiny_domains(per_center, seed)]
    return export_wilds_layout(domains, root)


@pytest.fixture
def wilds10(tmp_path):
    return write_fixture(tmp_path / "wilds", 2)


ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture
def criterion(request):
    """Record PASS/FAIL for one numbered acceptance criterion; use as a context manager."""

    class Recorder:
        def __init__(self, number):
            self.number = number
            self.detail = ""

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            detail = self.detail if exc_type is None else f"{self.detail} {exc_type.__name__}: {exc}".strip()
            ACCEPTANCE[self.number] = (status, detail)
            print(f"criterion {self.number}: {status} {detail}")
            return False

    return Recorder


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}"[:400])
