import numpy as np
import pytest

from blockgs.dense import UNIT_ROUNDOFF

U = UNIT_ROUNDOFF


def geometric(n, m, kappa, seed=0):
    """Independent generator for tests: numpy QR, log-spaced singular values."""
    rng = np.random.default_rng(seed)
    Uq, _ = np.linalg.qr(rng.standard_normal((n, m)))
    V, _ = np.linalg.qr(rng.standard_normal((m, m)))
    return Uq @ np.diag(np.logspace(0, -np.log10(kappa), m)) @ V.T


def sign_align(Q, ref):
    """Flip columns of Q so their inner products with ref are nonnegative."""
    signs = np.sign(np.sum(Q * ref, axis=0))
    signs[signs == 0] = 1.0
    return Q * signs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
