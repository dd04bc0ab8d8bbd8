"""Quantizing tokenizer: ordered trees <-> fixed-vocabulary token sequences.

Vocabulary: ids 0..255 are value bins, 256 = SOS, 257 = EOS, 258 = PAD.  All
eight channels share the value ids; a token's channel is its position modulo
8 inside the branch block (s.x s.y s.z s.r t.x t.y t.z t.r).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityError, EmptyGenerationError
from .ordering import BranchPermutation, Strategy, order_branches
from .tree import GrowthSequence, NormalizationTransform, TreeSkeleton, normalize

N_BINS = 256
SOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259
GROUP = 8
FRAME = 8  # SOS / EOS run length
GROWTH_TOTAL_LENGTH = 1027 * 8

RADIUS_CHANNELS = (3, 7)
CHANNELS = ("coord", "coord", "coord", "radius", "coord", "coord", "coord", "radius")

# process-wide counters: "clamped" values and "dropped_groups" during decoding
TELEMETRY: Counter = Counter()


@dataclass(frozen=True, eq=False)
class Quantizer:
    coord_edges: np.ndarray
    radius_edges: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        for name in ("coord_edges", "radius_edges"):
            e = np.array(getattr(self, name), dtype=np.float64)
            if e.shape != (N_BINS + 1,) or not np.all(np.diff(e) > 0):
                raise ValueError(f"{name} must be {N_BINS + 1} strictly increasing values")
            e.setflags(write=False)
            object.__setattr__(self, name, e)

    def edges(self, channel: str) -> np.ndarray:
        return self.radius_edges if channel == "radius" else self.coord_edges

    def midpoints(self, channel: str) -> np.ndarray:
        e = self.edges(channel)
        return (e[:-1] + e[1:]) / 2

    def bin_width(self, channel: str, k) -> np.ndarray:
        e = self.edges(channel)
        k = np.asarray(k)
        return e[k + 1] - e[k]

    def to_text(self) -> str:
        lines = ["hgtree-quantizer 1", f"provenance {self.provenance}"]
        for channel in ("coord", "radius"):
            lines.append(channel + " " + " ".join(repr(float(v)) for v in self.edges(channel)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Quantizer":
        fields = {}
        provenance = ""
        for line in text.splitlines():
            key, _, rest = line.partition(" ")
            if key == "provenance":
                provenance = rest
            elif key in ("coord", "radius"):
                fields[key] = np.array([float(v) for v in rest.split()])
        if set(fields) != {"coord", "radius"}:
            raise ValueError("quantizer text needs 'coord' and 'radius' edge lines")
        return cls(fields["coord"], fields["radius"], provenance)

    def save(self, path) -> None:
        _atomic_write_text(Path(path), self.to_text())

    @classmethod
    def load(cls, path) -> "Quantizer":
        return cls.from_text(Path(path).read_text())


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def uniform_coord_edges() -> np.ndarray:
    return np.linspace(-1.0, 1.0, N_BINS + 1)


def fit_quantizer(corpus: Iterable[TreeSkeleton], name: str = "corpus") -> Quantizer:
    """Uniform coordinate bins; equal-frequency radius bins fitted to the corpus."""
    radii = np.concatenate([t.radii.ravel() for t in corpus])
    if radii.size == 0:
        raise ValueError("empty corpus")
    lo, hi = float(radii.min()), float(radii.max())
    edges = np.quantile(radii, np.linspace(0.0, 1.0, N_BINS + 1))
    edges[0], edges[-1] = lo, hi
    n_distinct = np.unique(radii).size
    if n_distinct >= N_BINS and np.all(np.diff(edges) > 0):
        provenance = f"{name}; radius=quantile; n_radii={radii.size}"
    else:
        if hi <= lo:
            hi = lo * (1 + 1e-6) if lo > 0 else 1e-6
        edges = np.linspace(lo, hi, N_BINS + 1)
        provenance = f"{name}; radius=uniform-fallback; distinct_radii={n_distinct}"
    return Quantizer(uniform_coord_edges(), edges, provenance)


def quantize(v, channel: str, q: Quantizer) -> np.ndarray:
    """Bin index k with ``edges[k] <= v < edges[k+1]``; out-of-range values clamp."""
    e = q.edges(channel)
    v = np.asarray(v, dtype=np.float64)
    out_of_range = int(np.count_nonzero((v < e[0]) | (v > e[-1])))
    if out_of_range:
        TELEMETRY["clamped"] += out_of_range
    k = np.searchsorted(e, v, side="right") - 1
    return np.clip(k, 0, N_BINS - 1)


def dequantize(k, channel: str, q: Quantizer) -> np.ndarray:
    return q.midpoints(channel)[np.asarray(k)]


def quantize_rows(rows: np.ndarray, q: Quantizer) -> np.ndarray:
    """(n, 8) continuous rows -> (n, 8) value ids."""
    out = np.empty(rows.shape, dtype=np.int64)
    for c, channel in enumerate(CHANNELS):
        out[:, c] = quantize(rows[:, c], channel, q)
    return out


def dequantize_rows(ids: np.ndarray, q: Quantizer) -> np.ndarray:
    ids = np.asarray(ids).reshape(-1, GROUP)
    out = np.empty(ids.shape, dtype=np.float64)
    for c, channel in enumerate(CHANNELS):
        out[:, c] = dequantize(ids[:, c], channel, q)
    return out


@dataclass(frozen=True, eq=False)
class TokenSequence:
    tokens: np.ndarray
    n_branches: int

    def __post_init__(self):
        t = np.array(self.tokens, dtype=np.int64)
        t.setflags(write=False)
        object.__setattr__(self, "tokens", t)

    def __len__(self) -> int:
        return len(self.tokens)

    def to_text(self) -> str:
        return " ".join(str(int(v)) for v in self.tokens)

    @classmethod
    def from_text(cls, text: str) -> "TokenSequence":
        toks = np.array([int(v) for v in text.split()], dtype=np.int64)
        n = int(np.count_nonzero(toks < N_BINS)) // GROUP
        return cls(toks, n)


def sequence_length(n_max: int) -> int:
    return GROUP * (n_max + 2)


def frame_tree(ids: np.ndarray) -> np.ndarray:
    """SOS block + value ids + EOS block, no padding."""
    return np.concatenate([np.full(FRAME, SOS), np.asarray(ids, dtype=np.int64).ravel(), np.full(FRAME, EOS)])


def tokenize(tree: TreeSkeleton, perm: BranchPermutation, q: Quantizer, n_max: int) -> TokenSequence:
    if tree.n > n_max:
        raise CapacityError(f"tree has {tree.n} branches, capacity is {n_max}")
    rows = tree.data[list(perm.order)]
    body = frame_tree(quantize_rows(rows, q))
    total = sequence_length(n_max)
    tokens = np.full(total, PAD, dtype=np.int64)
    tokens[: len(body)] = body
    return TokenSequence(tokens, tree.n)


@dataclass
class DecodeStats:
    dropped_groups: int = 0
    complete_groups: int = 0


def _value_groups(tokens: np.ndarray, start: int, stats: DecodeStats):
    """Yield value groups from ``start`` until a special token at a group boundary.

    Returns (groups, index just past the last consumed group)."""
    groups = []
    i = start
    n = len(tokens)
    while i < n:
        if tokens[i] >= N_BINS:
            break
        if i + GROUP > n:
            stats.dropped_groups += 1
            i = n
            break
        g = tokens[i:i + GROUP]
        if np.any(g >= N_BINS):
            stats.dropped_groups += 1
        else:
            groups.append(g)
        i += GROUP
    return groups, i


def detokenize(seq, q: Quantizer, stats: DecodeStats | None = None, species_tag=None) -> TreeSkeleton:
    tokens = np.asarray(seq.tokens if isinstance(seq, TokenSequence) else seq, dtype=np.int64)
    stats = stats if stats is not None else DecodeStats()
    if len(tokens) == 0 or tokens[0] != SOS:
        raise EmptyGenerationError("sequence does not begin with SOS")
    i = 0
    while i < len(tokens) and tokens[i] == SOS:
        i += 1
    groups, _ = _value_groups(tokens, i, stats)
    TELEMETRY["dropped_groups"] += stats.dropped_groups
    stats.complete_groups = len(groups)
    if not groups:
        raise EmptyGenerationError("no complete branch group")
    return TreeSkeleton(dequantize_rows(np.stack(groups), q), species_tag)


def encode_tree(tree: TreeSkeleton, strategy, q: Quantizer, n_max: int, bits: int | None = None) -> TokenSequence:
    perm = order_branches(tree, strategy) if bits is None else order_branches(tree, strategy, bits)
    return tokenize(tree, perm, q, n_max)


# ---- growth sequences --------------------------------------------------------


def normalize_growth(gs: GrowthSequence) -> tuple[GrowthSequence, NormalizationTransform]:
    """Normalize all stages with the final stage's transform (shared frame)."""
    _, xf = normalize(gs.final)
    return GrowthSequence(tuple(xf.apply(s) for s in gs.stages)), xf


def tokenize_growth(gs: GrowthSequence, strategy, q: Quantizer, stage_n_max: int,
                    total_length: int = GROWTH_TOTAL_LENGTH) -> TokenSequence:
    """Concatenate the ten framed stage token lists, then pad to ``total_length``."""
    if total_length % GROUP:
        raise ValueError("total_length must be a multiple of 8")
    blocks = []
    for k, stage in enumerate(gs.stages):
        if stage.n > stage_n_max:
            raise CapacityError(f"stage {k} has {stage.n} branches, budget is {stage_n_max}", stage=k)
        perm = order_branches(stage, strategy)
        blocks.append(frame_tree(quantize_rows(stage.data[list(perm.order)], q)))
    body = np.concatenate(blocks)
    if len(body) > total_length:
        raise CapacityError(f"growth sequence needs {len(body)} tokens, capacity is {total_length}")
    tokens = np.full(total_length, PAD, dtype=np.int64)
    tokens[: len(body)] = body
    return TokenSequence(tokens, sum(s.n for s in gs.stages))


def split_frames(tokens: Sequence[int]) -> list[np.ndarray]:
    """Split a concatenation of SOS...EOS frames into per-frame token arrays."""
    tokens = np.asarray(tokens, dtype=np.int64)
    frames = []
    i, n = 0, len(tokens)
    while i < n and tokens[i] == SOS:
        start = i
        while i < n and tokens[i] == SOS:
            i += 1
        _, i = _value_groups(tokens, i, DecodeStats())
        if i >= n or tokens[i] != EOS:
            frames.append(tokens[start:i])
            break
        while i < n and tokens[i] == EOS:
            i += 1
        frames.append(tokens[start:i])
    return frames


def detokenize_growth(tokens, q: Quantizer) -> list[TreeSkeleton]:
    out = []
    for frame in split_frames(tokens):
        try:
            out.append(detokenize(frame, q))
        except EmptyGenerationError:
            break
    return out
