import numpy as np
import pytest

from hmcseg.hierarchy import LabelHierarchy, builtin_semantickitti, parse_hierarchy

CHAIN = """\
any
static > any
road > static
"""

# three leaves per branch, height 3
SMALL = """\
any
static > any
dynamic > any
road > static
sidewalk > static
building > static
car > dynamic
person > dynamic
"""


def random_hierarchy(
    rng: np.random.Generator, height: int, max_children: int = 3, min_children: int = 1
) -> LabelHierarchy:
    """Uniform-depth random tree; every internal node has min..max_children children."""
    names, parents = ["root"], [None]
    frontier = ["root"]
    for depth in range(1, height):
        nxt = []
        for p in frontier:
            for _ in range(int(rng.integers(min_children, max_children + 1))):
                name = f"n{len(names)}"
                names.append(name)
                parents.append(p)
                nxt.append(name)
        frontier = nxt
    return LabelHierarchy.from_parents(names, parents)


@pytest.fixture(scope="session")
def kitti():
    return builtin_semantickitti()


@pytest.fixture(scope="session")
def small():
    return parse_hierarchy(SMALL)


@pytest.fixture(scope="session")
def chain():
    return parse_hierarchy(CHAIN)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
