"""Tube meshes for skeletons, written as Wavefront OBJ text."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidParamsError
from .tree import TreeSkeleton, _orthonormal_frame

log = logging.getLogger(__name__)


@dataclass
class TubeMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3), 0-based
    skipped: int = 0

    def to_obj(self) -> str:
        lines = [f"# tubes: {len(self.vertices)} vertices, {len(self.faces)} triangles, {self.skipped} skipped"]
        lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.faces]
        return "\n".join(lines) + "\n"


def tube_mesh(tree: TreeSkeleton, sides: int = 8) -> TubeMesh:
    """One open truncated cone per branch: a ring at s (radius s.r) and one at t (radius t.r).

    Ring vertices run counter-clockwise around the branch axis, so each tube's
    faces wind outward.  Zero-length branches are skipped and counted."""
    if sides < 3:
        raise InvalidParamsError("a tube needs at least 3 sides")
    verts, faces, skipped = [], [], 0
    ang = 2.0 * np.pi * np.arange(sides) / sides
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    for b in tree.branches:
        s = np.array(b.s[:3], dtype=np.float64)
        t = np.array(b.t[:3], dtype=np.float64)
        axis = t - s
        length = np.linalg.norm(axis)
        if length <= 0:
            skipped += 1
            continue
        axis /= length
        u, v = (e[0] for e in _orthonormal_frame(axis[None]))
        if np.dot(np.cross(u, v), axis) < 0:
            u, v = v, u
        base = 2 * sides * len(verts)
        offs = ring[:, :1] * u + ring[:, 1:] * v
        verts.append(np.concatenate([s + b.s[3] * offs, t + b.t[3] * offs]))
        for i in range(sides):
            j = (i + 1) % sides
            a0, a1, b0, b1 = base + i, base + j, base + sides + i, base + sides + j
            faces.append((a0, a1, b1))
            faces.append((a0, b1, b0))
    if skipped:
        log.warning("skipped %d zero-length branches", skipped)
    V = np.concatenate(verts) if verts else np.zeros((0, 3))
    F = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    return TubeMesh(V, F, skipped)


def export_mesh(tree: TreeSkeleton, path, sides: int = 8) -> TubeMesh:
    """Write ``tree`` as an OBJ tube mesh (write-temp-then-rename)."""
    mesh = tube_mesh(tree, sides)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(mesh.to_obj())
    tmp.replace(path)
    return mesh


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Minimal OBJ reader for ``v`` and triangular ``f`` records (0-based faces)."""
    vs, fs = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vs.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            fs.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return np.asarray(vs, dtype=np.float64).reshape(-1, 3), np.asarray(fs, dtype=np.int64).reshape(-1, 3)
