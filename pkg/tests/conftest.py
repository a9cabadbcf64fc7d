import numpy as np
import pytest

from pointer_mixture.ast_pipeline import AstNode


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def random_tree(rng: np.random.Generator, max_nodes: int = 200, n_types: int = 12,
                n_values: int = 30) -> list:
    """Random tree with nodes listed in pre-order (the corpus convention)."""
    n = int(rng.integers(1, max_nodes + 1))
    parent = [-1] + [int(rng.integers(0, i)) for i in range(1, n)]
    kids = [[] for _ in range(n)]
    for i in range(1, n):
        kids[parent[i]].append(i)
    order = []
    stack = [0]
    while stack:
        i = stack.pop()
        order.append(i)
        stack.extend(reversed(kids[i]))
    new = {old: k for k, old in enumerate(order)}
    nodes = []
    for old in order:
        ch = tuple(new[c] for c in kids[old])
        value = None if ch else (f"v{int(rng.integers(n_values))}" if rng.random() < 0.9 else None)
        nodes.append(AstNode(f"T{int(rng.integers(n_types))}", value, ch))
    return nodes


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES: list = []


def report_criterion(number: int, ok, detail: str) -> None:
    """``ok`` is True, False or None (skipped)."""
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    line = f"criterion {number}: {status} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
