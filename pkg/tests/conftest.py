import numpy as np
import pytest

from metaloop import tensor as T


def central_diff(f, arrays, eps=1e-5):
    """Central finite differences of scalar ``f(*arrays)`` for each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + eps
            hi = f(*arrays)
            a[idx] = old - eps
            lo = f(*arrays)
            a[idx] = old
            g[idx] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    a = np.concatenate([np.ravel(x) for x in a]) if isinstance(a, (list, tuple)) else np.ravel(a)
    b = np.concatenate([np.ravel(x) for x in b]) if isinstance(b, (list, tuple)) else np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def f64(a, grad=True):
    return T.tensor(np.asarray(a, dtype=np.float64), "f64", requires_grad=grad)


_ACCEPTANCE: dict[int, str] = {}


def record_acceptance(criterion: int, ok: bool, detail: str) -> None:
    """Print and remember one PASS/FAIL line for an acceptance criterion."""
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for criterion in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[criterion])
