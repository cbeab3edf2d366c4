import numpy as np
import pytest

from nullora import numerics


def planted(d_out, d_in, rank, seed, lo=1.0, hi=10.0):
    """Exactly rank-deficient weight built from orthonormal factors."""
    rng = np.random.default_rng(seed)
    U = numerics.orthonormalize(rng.standard_normal((d_out, rank)))
    V = numerics.orthonormalize(rng.standard_normal((d_in, rank)))
    return (U * rng.uniform(lo, hi, rank)) @ V.T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's outcome for the terminal summary."""

    def record(number: int, ok: bool, detail: str):
        _ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, _ACCEPTANCE[number]

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
