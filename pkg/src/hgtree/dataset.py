"""JSON-lines dataset files for trees and growth sequences.

One record per line::

    {"species_tag": "elm", "n_branches": 3, "branches": [8*n floats], "parents": [...]}
    {"species_tag": "elm", "stages": [{"stage": 0, "n_branches": ..., "branches": [...]}, ...]}

``parents`` is optional (-1 marks the root).  Floats are written with ``repr``
so a write/read round trip is exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .tree import GrowthSequence, TreeSkeleton


def tree_record(tree: TreeSkeleton) -> dict:
    rec = {"species_tag": tree.species_tag, "n_branches": tree.n,
           "branches": [float(v) for v in np.asarray(tree.data).reshape(-1)]}
    if tree.parents is not None:
        rec["parents"] = [int(p) for p in tree.parents]
    return rec


def tree_from_record(rec: dict) -> TreeSkeleton:
    n = int(rec["n_branches"])
    data = np.asarray(rec["branches"], dtype=np.float64)
    if data.size != 8 * n:
        raise ValueError(f"record says {n} branches but carries {data.size} values")
    parents = rec.get("parents")
    return TreeSkeleton(data.reshape(n, 8), rec.get("species_tag"), tuple(parents) if parents is not None else None)


def growth_record(gs: GrowthSequence) -> dict:
    stages = []
    for k, s in enumerate(gs.stages):
        r = tree_record(s)
        r.pop("species_tag")
        stages.append({"stage": k, **r})
    return {"species_tag": gs.final.species_tag, "stages": stages}


def growth_from_record(rec: dict) -> GrowthSequence:
    tag = rec.get("species_tag")
    stages = sorted(rec["stages"], key=lambda r: r["stage"])
    return GrowthSequence(tuple(tree_from_record({"species_tag": tag, **s}) for s in stages))


def write_jsonl(path, items: Iterable) -> None:
    """Trees and/or growth sequences -> JSONL (atomic)."""
    path = Path(path)
    lines = []
    for it in items:
        rec = growth_record(it) if isinstance(it, GrowthSequence) else tree_record(it)
        lines.append(json.dumps(rec, separators=(",", ":")))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines))
    tmp.replace(path)


def read_jsonl(path) -> list:
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        rec = json.loads(line)
        try:
            out.append(growth_from_record(rec) if "stages" in rec else tree_from_record(rec))
        except (KeyError, ValueError) as e:
            raise ValueError(f"{path}:{i + 1}: {e}") from e
    return out


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
