"""Continuous tree representation: branches, tree graphs, normalization,
augmentation and surface point sampling.

A tree is stored as an ``(n, 8)`` float array, one row per branch laid out as
``s.x s.y s.z s.r t.x t.y t.z t.r``.  ``BranchPoint``/``Branch`` are light
views over those rows for code that wants named access.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import DegenerateGeometryError, NotATreeError

EPS_CONNECT = 1e-6
N_MAX_ELM = 200
N_MAX_DEFAULT = 1000


class BranchPoint(NamedTuple):
    x: float
    y: float
    z: float
    r: float


class Branch(NamedTuple):
    s: BranchPoint
    t: BranchPoint

    @property
    def length(self) -> float:
        return math.dist(self.s[:3], self.t[:3])


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TreeSkeleton:
    """Unordered set of branches.  Row order is storage order only.

    ``parents`` optionally carries simulator-native parent links (index or -1);
    trees loaded from external data leave it ``None`` and rely on
    :func:`build_tree_graph`.
    """

    data: np.ndarray
    species_tag: str | None = None
    parents: tuple[int, ...] | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data.reshape(-1, 8)
        if data.ndim != 2 or data.shape[1] != 8:
            raise ValueError(f"tree data must have shape (n, 8), got {data.shape}")
        object.__setattr__(self, "data", _frozen(data))
        if self.parents is not None:
            if len(self.parents) != len(data):
                raise ValueError("parents length must equal branch count")
            object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))

    @classmethod
    def from_branches(cls, branches: Sequence[Branch], species_tag=None) -> "TreeSkeleton":
        rows = [tuple(b.s) + tuple(b.t) for b in branches]
        return cls(np.array(rows, dtype=np.float64).reshape(-1, 8), species_tag)

    @property
    def n(self) -> int:
        return int(self.data.shape[0])

    def __len__(self) -> int:
        return self.n

    @property
    def branches(self) -> list[Branch]:
        return [Branch(BranchPoint(*row[:4]), BranchPoint(*row[4:])) for row in self.data.tolist()]

    def __iter__(self) -> Iterator[Branch]:
        return iter(self.branches)

    @property
    def starts(self) -> np.ndarray:
        return self.data[:, 0:3]

    @property
    def ends(self) -> np.ndarray:
        return self.data[:, 4:7]

    @property
    def radii(self) -> np.ndarray:
        return self.data[:, [3, 7]]

    def points(self) -> np.ndarray:
        """All endpoint coordinates, shape ``(2n, 3)``."""
        return np.concatenate([self.starts, self.ends], axis=0)

    def subset(self, indices: Sequence[int]) -> "TreeSkeleton":
        indices = [int(i) for i in indices]
        parents = None
        if self.parents is not None:
            remap = {old: new for new, old in enumerate(indices)}
            parents = tuple(remap.get(self.parents[i], -1) for i in indices)
        return TreeSkeleton(self.data[indices], self.species_tag, parents)

    def with_data(self, data: np.ndarray) -> "TreeSkeleton":
        return TreeSkeleton(data, self.species_tag, self.parents)

    def equals(self, other: "TreeSkeleton", atol: float = 0.0) -> bool:
        return self.data.shape == other.data.shape and bool(
            np.all(np.abs(self.data - other.data) <= atol)
        )

    def validate(self, n_max: int | None = None) -> None:
        if self.n < 1:
            raise ValueError("tree must have at least one branch")
        if n_max is not None and self.n > n_max:
            raise ValueError(f"tree has {self.n} branches, limit is {n_max}")
        if np.any(self.radii <= 0):
            raise ValueError("radii must be strictly positive")
        if np.any(np.linalg.norm(self.ends - self.starts, axis=1) <= 0):
            raise ValueError("zero-length branch")


@dataclass(frozen=True)
class GrowthSequence:
    stages: tuple[TreeSkeleton, ...]

    N_STAGES = 10

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if len(self.stages) != self.N_STAGES:
            raise ValueError(f"growth sequence needs {self.N_STAGES} stages, got {len(self.stages)}")

    @property
    def final(self) -> TreeSkeleton:
        return self.stages[-1]

    def counts(self) -> list[int]:
        return [s.n for s in self.stages]


@dataclass(frozen=True)
class TreeGraph:
    root: int
    parent: tuple[int | None, ...]
    children: tuple[tuple[int, ...], ...]

    @property
    def n(self) -> int:
        return len(self.parent)

    def depths(self) -> list[int]:
        depth = [0] * self.n
        for b in _preorder(self.root, self.children):
            p = self.parent[b]
            depth[b] = 0 if p is None else depth[p] + 1
        return depth


def _preorder(root: int, children) -> list[int]:
    out, stack = [], [root]
    while stack:
        b = stack.pop()
        out.append(b)
        stack.extend(reversed(children[b]))
    return out


def canonical_child_order(tree: TreeSkeleton, kids: Sequence[int]) -> tuple[int, ...]:
    """Children sorted by (t.z, t.y, t.x) descending, then by branch index."""
    d = tree.data
    return tuple(sorted(kids, key=lambda c: (-d[c, 6], -d[c, 5], -d[c, 4], c)))


def build_tree_graph(tree: TreeSkeleton, eps_connect: float = EPS_CONNECT) -> TreeGraph:
    """Infer the parent of every branch from endpoint adjacency.

    The parent of ``b`` is the branch ``a != b`` whose distal end ``a.t`` is
    nearest to ``b.s``, provided the gap is at most ``eps_connect``.
    """
    n = tree.n
    if n == 0:
        raise NotATreeError("empty tree", [])
    starts, ends = tree.starts, tree.ends
    parent: list[int | None] = [None] * n
    for lo in range(0, n, 512):
        block = starts[lo:lo + 512]
        d2 = ((block[:, None, :] - ends[None, :, :]) ** 2).sum(-1)
        rows = np.arange(len(block))
        d2[rows, rows + lo] = np.inf
        best = d2.argmin(axis=1)
        ok = d2[rows, best] <= eps_connect * eps_connect
        for i in np.flatnonzero(ok):
            parent[lo + i] = int(best[i])

    orphans = [b for b in range(n) if parent[b] is None]
    if len(orphans) != 1:
        if not orphans:
            raise NotATreeError("no parentless branch (cycle)", list(range(n)))
        raise NotATreeError("more than one parentless branch", orphans)
    root = orphans[0]

    kids: list[list[int]] = [[] for _ in range(n)]
    for b, p in enumerate(parent):
        if p is not None:
            kids[p].append(b)
    children = tuple(canonical_child_order(tree, k) for k in kids)
    seen = _preorder(root, children)
    if len(seen) != n:
        unreached = sorted(set(range(n)) - set(seen))
        raise NotATreeError("cycle detected; branches unreachable from root", unreached)
    return TreeGraph(root=root, parent=tuple(parent), children=children)


def graph_from_parents(tree: TreeSkeleton) -> TreeGraph:
    """TreeGraph from simulator-native parent links."""
    if tree.parents is None:
        raise ValueError("tree carries no native parent links")
    parent = [None if p < 0 else p for p in tree.parents]
    roots = [b for b, p in enumerate(parent) if p is None]
    if len(roots) != 1:
        raise NotATreeError("native links do not form a single-rooted tree", roots)
    kids: list[list[int]] = [[] for _ in range(tree.n)]
    for b, p in enumerate(parent):
        if p is not None:
            kids[p].append(b)
    children = tuple(canonical_child_order(tree, k) for k in kids)
    if len(_preorder(roots[0], children)) != tree.n:
        raise NotATreeError("native links contain a cycle", [])
    return TreeGraph(roots[0], tuple(parent), children)


@dataclass(frozen=True)
class NormalizationTransform:
    """``normalized = (p - center) * scale``; radii are multiplied by ``scale``."""

    center: tuple[float, float, float]
    scale: float
    r_max: float = field(default=0.0)

    def apply(self, tree: TreeSkeleton) -> TreeSkeleton:
        d = np.array(tree.data)
        c = np.asarray(self.center)
        d[:, 0:3] = (d[:, 0:3] - c) * self.scale
        d[:, 4:7] = (d[:, 4:7] - c) * self.scale
        d[:, [3, 7]] *= self.scale
        return tree.with_data(d)

    def invert(self, tree: TreeSkeleton) -> TreeSkeleton:
        d = np.array(tree.data)
        c = np.asarray(self.center)
        d[:, 0:3] = d[:, 0:3] / self.scale + c
        d[:, 4:7] = d[:, 4:7] / self.scale + c
        d[:, [3, 7]] /= self.scale
        return tree.with_data(d)


def normalize(tree: TreeSkeleton) -> tuple[TreeSkeleton, NormalizationTransform]:
    if tree.n == 0:
        raise DegenerateGeometryError("empty tree")
    pts = tree.points()
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float((hi - lo).max())
    if not extent > 0:
        raise DegenerateGeometryError("all endpoints coincide")
    center = (lo + hi) / 2
    scale = 2.0 / extent
    xf = NormalizationTransform(tuple(float(v) for v in center), scale)
    out = xf.apply(tree)
    xf = NormalizationTransform(xf.center, scale, float(out.radii.max()))
    return out, xf


def augment(tree: TreeSkeleton, theta_z: float, mirror: bool, renormalize: bool = True) -> TreeSkeleton:
    """Mirror x -> -x (optional), then rotate about the z axis by ``theta_z``."""
    d = np.array(tree.data)
    c, s = math.cos(theta_z), math.sin(theta_z)
    for off in (0, 4):
        x, y = d[:, off].copy(), d[:, off + 1].copy()
        if mirror:
            x = -x
        d[:, off] = c * x - s * y
        d[:, off + 1] = s * x + c * y
    out = tree.with_data(d)
    if renormalize and np.abs(out.points()).max() > 1.0:
        out, _ = normalize(out)
    return out


def branch_areas(tree: TreeSkeleton) -> np.ndarray:
    """Lateral surface area of each truncated-cone branch."""
    h = np.linalg.norm(tree.ends - tree.starts, axis=1)
    r1, r2 = tree.data[:, 3], tree.data[:, 7]
    return math.pi * (r1 + r2) * np.sqrt(h * h + (r1 - r2) ** 2)


def _orthonormal_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.where(np.abs(axis[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(axis, e1)
    return e1, e2


def sample_point_cloud(tree: TreeSkeleton, n_points: int, seed=0, return_branch: bool = False):
    """Points drawn uniformly by area over the lateral surfaces of all branches."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    area = branch_areas(tree)
    which = rng.choice(tree.n, size=n_points, p=area / area.sum())
    d = tree.data[which]
    s, t = d[:, 0:3], d[:, 4:7]
    r1, r2 = d[:, 3], d[:, 7]
    # density along the axis is proportional to the local radius
    v = rng.random(n_points)
    dr = r2 - r1
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(
            np.abs(dr) > 1e-12 * np.maximum(r1, r2),
            (np.sqrt(r1 * r1 + v * (r2 * r2 - r1 * r1)) - r1) / dr,
            v,
        )
    u = np.clip(u, 0.0, 1.0)
    axis = t - s
    axis_n = axis / np.linalg.norm(axis, axis=1, keepdims=True)
    e1, e2 = _orthonormal_frame(axis_n)
    phi = rng.random(n_points) * 2 * math.pi
    rad = (r1 + u * dr)[:, None]
    pts = s + u[:, None] * axis + rad * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
    if return_branch:
        return pts, which
    return pts
