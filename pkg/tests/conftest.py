import numpy as np
import pytest

from arclust.config import DESK


@pytest.fixture
def desk64():
    """Desk reference configuration at 64-bit precision."""
    return DESK.replace(precision=64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict[str, list[tuple[bool, str]]] = {}


@pytest.fixture
def report():
    """Record a result for criterion ``A#``; parts of one criterion are merged into a single line."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        _ACCEPTANCE.setdefault(criterion, []).append((ok, detail))
        print(f"{criterion} {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k[1:])):
        parts = _ACCEPTANCE[key]
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"{key} {verdict} " + " | ".join(d for _, d in parts))
