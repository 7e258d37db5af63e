import numpy as np
import pytest

from parkfusion.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(
        input_channels=2,
        window=8,
        horizon=2,
        d_model=8,
        n_heads=2,
        n_layers=1,
        d_ff=16,
        calendar_features=("hour",),
        seed=3,
    )


def numeric_grad(f, arr, delta=1e-4):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + delta
        hi = f()
        arr[i] = old - delta
        lo = f()
        arr[i] = old
        out[i] = (hi - lo) / (2 * delta)
    return out


def rel_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-8))


# One line per acceptance criterion, printed after the test session.
ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
