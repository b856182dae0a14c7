import numpy as np
import pytest

from gamblets.exact import gamblet_transform
from gamblets.hierarchy import IndexTree, build_grid_tree, haar_operators
from gamblets.problems import assemble_fem


def random_spd(n, seed=0, shift=1.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, n))
    return X @ X.T + shift * n * np.eye(n) / 4


def binary_ops(q):
    """Haar operators for a 1-D binary tree with 2^q leaves."""
    return haar_operators(build_grid_tree(1, q, 2))


@pytest.fixture(scope="session")
def two_by_two():
    A = np.array([[2.0, -1.0], [-1.0, 2.0]])
    ops = haar_operators(IndexTree([[0, 0]]))
    return A, ops, gamblet_transform(A, ops)


def _fem(q):
    prob = assemble_fem(q)
    ops = haar_operators(build_grid_tree(2, q))
    return prob, ops


@pytest.fixture(scope="session")
def fem3():
    prob, ops = _fem(3)
    return prob, ops, gamblet_transform(prob.A, ops)


@pytest.fixture(scope="session")
def fem4():
    prob, ops = _fem(4)
    return prob, ops, gamblet_transform(prob.A, ops)


@pytest.fixture(scope="session")
def fem5():
    prob, ops = _fem(5)
    return prob, ops, gamblet_transform(prob.A, ops)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one status line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":").split(".")[0])):
            terminalreporter.write_line(line)
