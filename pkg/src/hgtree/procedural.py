"""Procedural tree corpus: a stochastic recursive branching process.

Each branch spawns a leader (continuation) and optional laterals at its tip.
Branches carry a birth time (parent birth plus own length), which orders the
storage rows chronologically and defines the ten growth snapshots.  Radii
follow a pipe-model rule on the number of terminal branches downstream, so a
branch only thickens as the tree grows and children are never thicker than
their parent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidParamsError
from .tree import GrowthSequence, TreeSkeleton

PIPE_EXPONENT = 2.5
GOLDEN_ANGLE = math.radians(137.508)


@dataclass(frozen=True)
class ProceduralParams:
    depth_range: tuple[int, int] = (4, 7)
    # probability of 0, 1, 2, ... children at each branch tip
    children_probs: tuple[float, ...] = (0.0, 0.3, 0.5, 0.2)
    length_decay: float = 0.8
    radius_decay: float = 0.7
    angle_range: tuple[float, float] = (25.0, 55.0)
    tropism: float = 0.3
    trunk_length: float = 1.0
    base_radius: float = 0.02
    seed: int = 0
    species_tag: str = "elm"

    def validate(self) -> None:
        lo, hi = self.depth_range
        if hi < 1 or lo > hi:
            raise InvalidParamsError(f"depth_range {self.depth_range} cannot produce a branch")
        lo = max(lo, 1)
        probs = np.asarray(self.children_probs, dtype=float)
        if probs.size == 0 or np.any(probs < 0) or probs.sum() <= 0:
            raise InvalidParamsError("children_probs must be non-negative with positive mass")
        for name in ("length_decay", "radius_decay"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise InvalidParamsError(f"{name} must lie in (0, 1), got {v}")
        a0, a1 = self.angle_range
        if not 0.0 <= a0 <= a1 <= 180.0:
            raise InvalidParamsError(f"angle_range {self.angle_range} outside [0, 180]")
        if not (self.trunk_length > 0 and self.base_radius > 0):
            raise InvalidParamsError("trunk_length and base_radius must be positive")
        if not 0.0 <= self.tropism <= 5.0:
            raise InvalidParamsError("tropism must lie in [0, 5]")


PROFILES: dict[str, tuple[ProceduralParams, int]] = {
    "elm": (ProceduralParams(), 200),
    "spruce": (
        ProceduralParams(
            depth_range=(5, 8),
            children_probs=(0.0, 0.15, 0.35, 0.35, 0.15),
            length_decay=0.72,
            radius_decay=0.6,
            angle_range=(55.0, 85.0),
            tropism=0.1,
            species_tag="spruce",
        ),
        1000,
    ),
    # small trees for fast desk-scale experiments
    "sapling": (
        ProceduralParams(
            depth_range=(2, 4),
            children_probs=(0.0, 0.35, 0.5, 0.15),
            length_decay=0.75,
            radius_decay=0.7,
            angle_range=(25.0, 60.0),
            tropism=0.3,
            species_tag="sapling",
        ),
        24,
    ),
}


def profile(name: str, seed: int = 0) -> tuple[ProceduralParams, int]:
    try:
        params, n_max = PROFILES[name]
    except KeyError:
        raise InvalidParamsError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
    return replace(params, seed=seed), n_max


def _rotate_towards(direction: np.ndarray, angle: float, azimuth: float) -> np.ndarray:
    """Tilt ``direction`` by ``angle`` about an axis orthogonal to it chosen by ``azimuth``."""
    helper = np.array([1.0, 0.0, 0.0]) if abs(direction[2]) > 0.9 else np.array([0.0, 0.0, 1.0])
    e1 = np.cross(direction, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(direction, e1)
    radial = math.cos(azimuth) * e1 + math.sin(azimuth) * e2
    out = math.cos(angle) * direction + math.sin(angle) * radial
    return out / np.linalg.norm(out)


def _grow(params: ProceduralParams, rng: np.random.Generator):
    lo, hi = params.depth_range
    max_depth = int(rng.integers(max(lo, 1), hi + 1))
    probs = np.asarray(params.children_probs, dtype=float)
    probs = probs / probs.sum()
    up = np.array([0.0, 0.0, 1.0])
    a0, a1 = (math.radians(a) for a in params.angle_range)

    starts, ends, parents, orders, births = [], [], [], [], []
    direction = _rotate_towards(up, rng.uniform(0.0, 0.08), rng.uniform(0, 2 * math.pi))
    length = params.trunk_length * rng.uniform(0.85, 1.15)
    # (start, direction, length, parent, order, depth, parent birth)
    stack = [(np.zeros(3), direction, length, -1, 0, 1, 0.0)]
    while stack:
        s, d, length, parent, order, depth, t0 = stack.pop()
        t = s + d * length
        idx = len(starts)
        starts.append(s)
        ends.append(t)
        parents.append(parent)
        orders.append(order)
        births.append(t0 + length)
        if depth >= max_depth:
            continue
        k = int(rng.choice(len(probs), p=probs))
        base_az = rng.uniform(0, 2 * math.pi)
        for c in range(k):
            if c == 0:
                nd = _rotate_towards(d, rng.uniform(0.0, a0 * 0.4), rng.uniform(0, 2 * math.pi))
                child_len = length * params.length_decay ** 0.5 * rng.uniform(0.85, 1.1)
                child_order = order
            else:
                az = base_az + c * GOLDEN_ANGLE + rng.uniform(-0.3, 0.3)
                nd = _rotate_towards(d, rng.uniform(a0, a1), az)
                child_len = length * params.length_decay * rng.uniform(0.8, 1.15)
                child_order = order + 1
            nd = nd + params.tropism * up * (1.0 - nd[2]) * 0.5
            nd /= np.linalg.norm(nd)
            stack.append((t.copy(), nd, child_len, idx, child_order, depth + 1, births[idx]))
    return (np.array(starts), np.array(ends), np.array(parents), np.array(orders), np.array(births))


def _radii(parents: np.ndarray, orders: np.ndarray, params: ProceduralParams):
    """Pipe-model radii for a chronological prefix (parents precede children)."""
    n = len(parents)
    leaves = np.zeros(n)
    has_child = np.zeros(n, dtype=bool)
    has_child[parents[parents >= 0]] = True
    leaves[~has_child] = 1.0
    for b in range(n - 1, 0, -1):
        leaves[parents[b]] += leaves[b]
    base = params.base_radius * params.radius_decay ** orders * leaves ** (1.0 / PIPE_EXPONENT)
    # same expression as a first child's base radius, so a tip never shrinks when a child appears
    tip = params.base_radius * params.radius_decay ** (orders + 1) * leaves ** (1.0 / PIPE_EXPONENT)
    child_max = np.zeros(n)
    for b in range(1, n):
        p = parents[b]
        child_max[p] = max(child_max[p], base[b])
    tip = np.where(has_child, child_max, tip)
    return base, tip


def generate_procedural(params: ProceduralParams, n_max: int) -> GrowthSequence:
    """Grow one tree and return ten chronological snapshots of it."""
    params.validate()
    if n_max < 1:
        raise InvalidParamsError("n_max must be >= 1")
    rng = np.random.default_rng(params.seed)
    starts, ends, parents, orders, births = _grow(params, rng)

    # chronological storage order; a child is always born after its parent
    order = np.lexsort((np.arange(len(births)), births))[:n_max]
    remap = np.full(len(births), -1)
    remap[order] = np.arange(len(order))
    starts, ends, orders, births = starts[order], ends[order], orders[order], births[order]
    parents = np.where(parents[order] >= 0, remap[parents[order]], -1)

    t_first, t_last = births[0], births[-1]
    stages = []
    for k in range(GrowthSequence.N_STAGES):
        cutoff = t_first + (t_last - t_first) * k / (GrowthSequence.N_STAGES - 1)
        m = len(births) if k == GrowthSequence.N_STAGES - 1 else int(np.searchsorted(births, cutoff, side="right"))
        m = max(m, 1)
        base, tip = _radii(parents[:m], orders[:m], params)
        data = np.concatenate([starts[:m], base[:, None], ends[:m], tip[:, None]], axis=1)
        stages.append(TreeSkeleton(data, params.species_tag, tuple(int(p) for p in parents[:m])))
    return GrowthSequence(tuple(stages))


def generate_corpus(profile_name: str, seeds, growth: bool = False):
    """Final-stage trees (or full growth sequences) for a list of seeds."""
    out = []
    for seed in seeds:
        params, n_max = profile(profile_name, int(seed))
        gs = generate_procedural(params, n_max)
        out.append(gs if growth else gs.final)
    return out
