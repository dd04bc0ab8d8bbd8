from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from hgtree.autograd import Tensor, mul, sum_
from hgtree.procedural import generate_corpus
from hgtree.tokenizer import fit_quantizer
from hgtree.tree import TreeSkeleton, normalize

settings.register_profile("hgtree", deadline=None, max_examples=60)
settings.load_profile("hgtree")


def branch(s, t, rs=0.05, rt=0.04):
    return [*s, rs, *t, rt]


def make_tree(rows, parents=None) -> TreeSkeleton:
    return TreeSkeleton(np.asarray(rows, dtype=np.float64), None, parents)


@pytest.fixture(scope="session")
def elm_trees():
    return [normalize(t)[0] for t in generate_corpus("elm", range(40))]


@pytest.fixture(scope="session")
def sapling_trees():
    return [normalize(t)[0] for t in generate_corpus("sapling", range(60))]


@pytest.fixture(scope="session")
def elm_quantizer():
    return fit_quantizer([normalize(t)[0] for t in generate_corpus("elm", range(1000, 1150))], "elm-test")


@pytest.fixture(scope="session")
def sapling_quantizer(sapling_trees):
    return fit_quantizer(sapling_trees, "sapling-test")


@pytest.fixture
def y_tree():
    """Trunk with two children; the first child has a grandchild."""
    return make_tree([
        branch((0, 0, -1), (0, 0, 0)),
        branch((0, 0, 0), (0.5, 0, 0.5)),
        branch((0, 0, 0), (-0.5, 0, 0.4)),
        branch((0.5, 0, 0.5), (0.6, 0, 1.0)),
    ])


def numeric_grad(f, arrays, i, h=1e-6):
    """Central differences of the scalar ``f(*arrays)`` with respect to ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(*arrays)
        x[idx] = old - h
        fm = f(*arrays)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def check_grads(op, arrays, rtol=1e-4, seed=0):
    """Compare autograd against finite differences of ``sum(op(...) * w)`` for a fixed random ``w``."""
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    probe = op(*[Tensor(a) for a in arrays])
    w = np.random.default_rng(seed).normal(size=probe.shape)

    def f(*xs):
        return float(np.sum(op(*[Tensor(a) for a in xs]).data * w))

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    sum_(mul(out, Tensor(w))).backward()
    for i, t in enumerate(ts):
        num = numeric_grad(f, arrays, i)
        got = np.zeros_like(num) if t.grad is None else t.grad
        scale = max(np.abs(num).max(), 1e-8)
        assert np.abs(got - num).max() / scale <= rtol, f"input {i} of {op}"


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
