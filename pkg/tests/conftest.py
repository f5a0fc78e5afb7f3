import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from voco import tensor as T


def numeric_grad(loss_of, leaf: T.Tensor, index, eps: float = 1e-5) -> float:
    """Central finite difference of ``loss_of()`` w.r.t. one entry of ``leaf``."""
    orig = leaf.data[index]
    leaf.data[index] = orig + eps
    with T.no_grad():
        up = loss_of().item()
    leaf.data[index] = orig - eps
    with T.no_grad():
        down = loss_of().item()
    leaf.data[index] = orig
    return (up - down) / (2 * eps)


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def gradcheck(loss_of, leaves, rng, points: int = 10, eps: float = 1e-5) -> float:
    """Worst relative error between backward() and finite differences at random entries."""
    for leaf in leaves:
        leaf.grad = None
    T.backward(loss_of())
    worst = 0.0
    for _ in range(points):
        leaf = leaves[rng.integers(len(leaves))]
        index = tuple(int(rng.integers(n)) for n in leaf.shape)
        analytic = float(leaf.grad[index])
        worst = max(worst, rel_err(analytic, numeric_grad(loss_of, leaf, index, eps)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record and print one pass/fail line for an acceptance criterion."""
    lines = request.config.stash.setdefault(VERDICTS, [])

    def record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
