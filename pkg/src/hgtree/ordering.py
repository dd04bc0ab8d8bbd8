"""Branch orderings used to linearize a tree into a token sequence."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass

import numpy as np

from .tree import EPS_CONNECT, TreeGraph, TreeSkeleton, build_tree_graph, graph_from_parents

HILBERT_BITS = 7


class Strategy(str, enum.Enum):
    ZYX = "zyx"
    HILBERT = "hilbert"
    DFS = "dfs"
    BFS = "bfs"


@dataclass(frozen=True)
class BranchPermutation:
    order: tuple[int, ...]
    strategy: Strategy

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(int(i) for i in self.order))
        if sorted(self.order) != list(range(len(self.order))):
            raise ValueError("order is not a permutation")

    def __len__(self) -> int:
        return len(self.order)

    def apply(self, tree: TreeSkeleton) -> TreeSkeleton:
        return tree.subset(self.order)


def order_zyx(tree: TreeSkeleton) -> BranchPermutation:
    s = tree.starts
    idx = np.arange(tree.n)
    # lexsort: last key is primary
    order = np.lexsort((idx, -s[:, 0], -s[:, 1], -s[:, 2]))
    return BranchPermutation(tuple(order), Strategy.ZYX)


def hilbert_encode(cells: np.ndarray, bits: int) -> np.ndarray:
    """Hilbert index of integer 3D cells on a ``2**bits`` grid (Skilling's transpose method)."""
    X = [np.asarray(cells[:, i], dtype=np.int64).copy() for i in range(3)]
    n = 3
    M = 1 << (bits - 1)
    Q = M
    while Q > 1:
        P = Q - 1
        for i in range(n):
            hit = (X[i] & Q) != 0
            t = (X[0] ^ X[i]) & P
            X0_new = np.where(hit, X[0] ^ P, X[0] ^ t)
            if i != 0:
                X[i] = np.where(hit, X[i], X[i] ^ t)
            X[0] = X0_new
        Q >>= 1
    for i in range(1, n):
        X[i] = X[i] ^ X[i - 1]
    t = np.zeros_like(X[0])
    Q = M
    while Q > 1:
        t = np.where((X[n - 1] & Q) != 0, t ^ (Q - 1), t)
        Q >>= 1
    X = [x ^ t for x in X]
    h = np.zeros_like(X[0])
    for b in range(bits - 1, -1, -1):
        for i in range(n):
            h = (h << 1) | ((X[i] >> b) & 1)
    return h


def hilbert_decode(index: np.ndarray, bits: int) -> np.ndarray:
    """Inverse of :func:`hilbert_encode`; returns ``(m, 3)`` integer cells."""
    h = np.asarray(index, dtype=np.int64)
    n = 3
    X = [np.zeros_like(h) for _ in range(n)]
    pos = 3 * bits - 1
    for b in range(bits - 1, -1, -1):
        for i in range(n):
            X[i] = X[i] | (((h >> pos) & 1) << b)
            pos -= 1
    N = 2 << (bits - 1)
    t = X[n - 1] >> 1
    for i in range(n - 1, 0, -1):
        X[i] = X[i] ^ X[i - 1]
    X[0] = X[0] ^ t
    Q = 2
    while Q != N:
        P = Q - 1
        for i in range(n - 1, -1, -1):
            hit = (X[i] & Q) != 0
            t = (X[0] ^ X[i]) & P
            X0_new = np.where(hit, X[0] ^ P, X[0] ^ t)
            if i != 0:
                X[i] = np.where(hit, X[i], X[i] ^ t)
            X[0] = X0_new
        Q <<= 1
    return np.stack(X, axis=1)


def grid_cells(points: np.ndarray, bits: int) -> np.ndarray:
    side = 1 << bits
    cells = np.floor((np.asarray(points) + 1.0) * 0.5 * side).astype(np.int64)
    return np.clip(cells, 0, side - 1)


def order_hilbert(tree: TreeSkeleton, bits: int = HILBERT_BITS) -> BranchPermutation:
    if not 1 <= bits <= 10:
        raise ValueError("bits must lie in [1, 10]")
    key = hilbert_encode(grid_cells(tree.starts, bits), bits)
    order = np.lexsort((np.arange(tree.n), key))
    return BranchPermutation(tuple(order), Strategy.HILBERT)


def order_dfs(graph: TreeGraph) -> BranchPermutation:
    out, stack = [], [graph.root]
    while stack:
        b = stack.pop()
        out.append(b)
        stack.extend(reversed(graph.children[b]))
    return BranchPermutation(tuple(out), Strategy.DFS)


def order_bfs(graph: TreeGraph) -> BranchPermutation:
    out, queue = [], deque([graph.root])
    while queue:
        b = queue.popleft()
        out.append(b)
        queue.extend(graph.children[b])
    return BranchPermutation(tuple(out), Strategy.BFS)


def tree_graph(tree: TreeSkeleton, eps_connect: float = EPS_CONNECT) -> TreeGraph:
    """Native parent links when the tree carries them, geometric inference otherwise."""
    if tree.parents is not None:
        return graph_from_parents(tree)
    return build_tree_graph(tree, eps_connect)


def order_branches(tree: TreeSkeleton, strategy, bits: int = HILBERT_BITS,
                   eps_connect: float = EPS_CONNECT) -> BranchPermutation:
    strategy = Strategy(strategy)
    if strategy is Strategy.ZYX:
        return order_zyx(tree)
    if strategy is Strategy.HILBERT:
        return order_hilbert(tree, bits)
    graph = tree_graph(tree, eps_connect)
    return order_dfs(graph) if strategy is Strategy.DFS else order_bfs(graph)
