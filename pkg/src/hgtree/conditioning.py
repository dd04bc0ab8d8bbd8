"""Point-cloud conditioning: learnable queries cross-attending to point embeddings."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError

N_QUERIES = 50
PREFIX_SLOTS = 56
N_POINTS = 200


class PointCloudEncoder:
    """xyz points -> a fixed 56-slot prefix (50 query outputs + 6 learned pad slots).

    Points carry no positional encoding, so the output is invariant to their order."""

    def __init__(self, dim: int, heads: int = 4, n_points: int = N_POINTS, n_queries: int = N_QUERIES,
                 slots: int = PREFIX_SLOTS, dtype="float32", seed: int = 0, params=None):
        if n_points < 1:
            raise ShapeError("point cloud encoder needs at least one point")
        if slots < n_queries or slots % 8:
            raise ShapeError("prefix slots must be a multiple of 8 and hold every query")
        self.dim, self.heads = dim, heads
        self.n_points, self.n_queries, self.slots = n_points, n_queries, slots
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        if params is not None:
            for k, v in params.items():
                self._add(k, v)
            return
        rng = np.random.default_rng(seed)
        D, std = dim, 0.02
        self._add("pc.in1.w", rng.normal(0, 1.0 / math.sqrt(3), (3, D)))
        self._add("pc.in1.b", rng.normal(0, 0.5, (D,)))
        self._add("pc.in2.w", rng.normal(0, 1.0 / math.sqrt(D), (D, D)))
        self._add("pc.in2.b", np.zeros(D))
        self._add("pc.queries", rng.normal(0, 1.0, (n_queries, D)))
        self._add("pc.ln.g", np.ones(D))
        self._add("pc.ln.b", np.zeros(D))
        for name in ("q", "k", "v"):
            self._add(f"pc.{name}.w", rng.normal(0, 1.0 / math.sqrt(D), (D, D)))
        self._add("pc.out.w", rng.normal(0, std, (D, D)))
        self._add("pc.out.b", np.zeros(D))
        self._add("pc.pad", rng.normal(0, std, (slots - n_queries, D)))

    def _add(self, name, arr):
        self.params[name] = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True, name=name)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def __call__(self, points) -> Tensor:
        return self.encode(points)

    def encode(self, points) -> Tensor:
        """``points``: ``(B, n_points, 3)`` or ``(n_points, 3)`` -> prefix ``(B, slots, dim)``."""
        pts = np.asarray(points, dtype=self.dtype)
        if pts.ndim == 2:
            pts = pts[None]
        if pts.ndim != 3 or pts.shape[1:] != (self.n_points, 3):
            raise ShapeError(f"expected (B, {self.n_points}, 3) points, got {pts.shape}")
        p = self.params
        B, D, H = pts.shape[0], self.dim, self.heads
        dh = D // H
        e = ag.gelu(ag.linear(Tensor(pts), p["pc.in1.w"], p["pc.in1.b"]))
        e = ag.linear(e, p["pc.in2.w"], p["pc.in2.b"])
        e = ag.layer_norm(e, p["pc.ln.g"], p["pc.ln.b"])
        q = ag.matmul(p["pc.queries"], p["pc.q.w"])  # (Q, D)
        k = ag.matmul(e, p["pc.k.w"])
        v = ag.matmul(e, p["pc.v.w"])
        q = ag.transpose(ag.reshape(q, (1, self.n_queries, H, dh)), (0, 2, 1, 3))
        k = ag.transpose(ag.reshape(k, (B, self.n_points, H, dh)), (0, 2, 1, 3))
        v = ag.transpose(ag.reshape(v, (B, self.n_points, H, dh)), (0, 2, 1, 3))
        q = ag.add(q, Tensor(np.zeros((B, H, self.n_queries, dh), dtype=self.dtype)))
        att = ag.attention(q, k, v)
        att = ag.reshape(ag.transpose(att, (0, 2, 1, 3)), (B, self.n_queries, D))
        out = ag.linear(att, p["pc.out.w"], p["pc.out.b"])
        pad = ag.add(p["pc.pad"], Tensor(np.zeros((B, self.slots - self.n_queries, D), dtype=self.dtype)))
        return ag.concat([out, pad], axis=1)
