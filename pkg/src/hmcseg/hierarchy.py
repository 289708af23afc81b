"""Label hierarchy trees.

A hierarchy is read from a small line-based text format::

    # comment
    any
    static > any
    road > static

The single line without ``>`` is the root. Leaves are the nodes without
children. Every leaf must sit at the same depth, so each labeled point has
exactly one correct class per level. Levels count upward from the leaves
(leaves are level 0, the root is level ``height - 1``).

Node ids are dense, leaves first, both groups in document order, so any
vector over all classes starts with the leaf-only slice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np


class HierarchyError(ValueError):
    """Raised for malformed or inconsistent hierarchy definitions."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Node:
    id: int
    name: str
    parent: int | None
    level: int


@dataclass(frozen=True)
class LabelHierarchy:
    """Immutable rooted label tree with uniform leaf depth."""

    nodes: tuple[Node, ...]
    height: int
    leaf_count: int
    _by_name: dict[str, int] = field(repr=False, compare=False)
    # ancestors[c, l] = node id of c's ancestor at level l, or -1 below level(c)
    _ancestors: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_parents(cls, names: list[str], parents: list[str | None]) -> "LabelHierarchy":
        """Build and validate a hierarchy from parallel name/parent lists."""
        return _build(names, parents, lines=None)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def root(self) -> int:
        return next(n.id for n in self.nodes if n.parent is None)

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    @property
    def levels(self) -> np.ndarray:
        return np.array([n.level for n in self.nodes], dtype=np.int64)

    @property
    def ancestor_table(self) -> np.ndarray:
        """(|nodes|, height) table; entry [c, l] is the level-l ancestor of c or -1."""
        return self._ancestors

    def id(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"unknown class name {name!r}") from None

    def name(self, c: int) -> str:
        return self.nodes[self._check(c)].name

    def level(self, c: int) -> int:
        return self.nodes[self._check(c)].level

    def parent(self, c: int) -> int | None:
        return self.nodes[self._check(c)].parent

    def is_leaf(self, c: int) -> bool:
        return self.level(c) == 0

    def nodes_at_level(self, level: int) -> list[int]:
        return [n.id for n in self.nodes if n.level == level]

    def children(self, c: int) -> list[int]:
        self._check(c)
        return [n.id for n in self.nodes if n.parent == c]

    def superclasses(self, c: int) -> list[int]:
        """Ancestors of ``c`` from its parent up to the root."""
        out = []
        p = self.parent(c)
        while p is not None:
            out.append(p)
            p = self.nodes[p].parent
        return out

    def ancestor_at_level(self, c: int, level: int) -> int:
        """The node on ``c``'s root path whose level is ``level``."""
        self._check(c)
        if not self.nodes[c].level <= level < self.height:
            raise ValueError(
                f"level {level} out of range [{self.nodes[c].level}, {self.height - 1}] "
                f"for class {self.nodes[c].name!r}"
            )
        return int(self._ancestors[c, level])

    def leaves_under(self, c: int) -> list[int]:
        lvl = self.level(c)
        return [s for s in range(self.leaf_count) if self._ancestors[s, lvl] == c]

    def serialize(self) -> str:
        lines = []
        for n in self.nodes:
            if n.parent is None:
                lines.append(n.name)
            else:
                lines.append(f"{n.name} > {self.nodes[n.parent].name}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        return f"h={self.height}, |λ|={len(self.nodes)}, n={self.leaf_count}"

    def _check(self, c: int) -> int:
        if not 0 <= c < len(self.nodes):
            raise IndexError(f"unknown class id {c}")
        return int(c)


def parse_hierarchy(text: str) -> LabelHierarchy:
    names: list[str] = []
    parents: list[str | None] = []
    lines: list[int] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ">" in line:
            name, _, parent = line.partition(">")
            name, parent = name.strip(), parent.strip()
            if not name or not parent or ">" in parent:
                raise HierarchyError(f"malformed entry {raw!r}", lineno)
        else:
            name, parent = line, None
        names.append(name)
        parents.append(parent)
        lines.append(lineno)
    return _build(names, parents, lines)


def _build(names, parents, lines) -> LabelHierarchy:
    def fail(msg, i=None):
        raise HierarchyError(msg, None if lines is None or i is None else lines[i])

    if not names:
        fail("empty hierarchy")
    index: dict[str, int] = {}
    for i, name in enumerate(names):
        if name in index:
            fail(f"duplicate class name {name!r}", i)
        index[name] = i
    roots = [i for i, p in enumerate(parents) if p is None]
    if len(roots) != 1:
        fail(f"expected exactly one root, found {len(roots)}", roots[1] if len(roots) > 1 else None)
    parent_idx: list[int | None] = []
    for i, p in enumerate(parents):
        if p is None:
            parent_idx.append(None)
        elif p not in index:
            fail(f"unknown parent {p!r} for {names[i]!r}", i)
        else:
            parent_idx.append(index[p])

    # depth via walk to the root; a walk longer than the node count is a cycle
    depth = [0] * len(names)
    for i in range(len(names)):
        d, j = 0, i
        while parent_idx[j] is not None:
            j = parent_idx[j]
            d += 1
            if d > len(names):
                fail(f"cycle through {names[i]!r}", i)
        depth[i] = d

    has_child = [False] * len(names)
    for p in parent_idx:
        if p is not None:
            has_child[p] = True
    leaf_pos = [i for i in range(len(names)) if not has_child[i]]
    height = max(depth) + 1
    for i in leaf_pos:
        if depth[i] != height - 1:
            fail(
                f"leaf {names[i]!r} has path length {depth[i] + 1}, expected {height}",
                i,
            )

    order = leaf_pos + [i for i in range(len(names)) if has_child[i]]
    new_id = {old: new for new, old in enumerate(order)}
    nodes = tuple(
        Node(
            id=new_id[old],
            name=names[old],
            parent=None if parent_idx[old] is None else new_id[parent_idx[old]],
            level=height - 1 - depth[old],
        )
        for old in order
    )
    anc = np.full((len(nodes), height), -1, dtype=np.int64)
    for n in nodes:
        c = n.id
        while c is not None:
            anc[n.id, nodes[c].level] = c
            c = nodes[c].parent
    return LabelHierarchy(
        nodes=nodes,
        height=height,
        leaf_count=len(leaf_pos),
        _by_name={n.name: n.id for n in nodes},
        _ancestors=anc,
    )


def load_hierarchy(path: str | Path) -> LabelHierarchy:
    return parse_hierarchy(Path(path).read_text(encoding="utf-8"))


def builtin_semantickitti_text() -> str:
    return resources.files("hmcseg.data").joinpath("semantickitti.hier").read_text(encoding="utf-8")


def builtin_semantickitti() -> LabelHierarchy:
    """The default 4-level SemanticKITTI taxonomy (19 leaves, 28 classes)."""
    return parse_hierarchy(builtin_semantickitti_text())
