"""Set-level evaluation: Chamfer-based MMD/COV, occupancy JSD, Connect, Novel and Unique."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .tokenizer import Quantizer
from .tree import EPS_CONNECT, TreeSkeleton, sample_point_cloud

JSD_GRID = 32
EVAL_POINTS = 512


def chamfer(a, b) -> float:
    """Symmetric Chamfer distance with squared nearest-neighbour distances.

    ``mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2``; 1-D input is treated as points on a line."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a.reshape(len(a), -1) if a.ndim < 2 else a
    b = b.reshape(len(b), -1) if b.ndim < 2 else b
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two nonempty point sets")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(np.mean(da ** 2) + np.mean(db ** 2))


def chamfer_matrix(gen: Sequence[np.ndarray], ref: Sequence[np.ndarray]) -> np.ndarray:
    """``D[i, j] = chamfer(gen[i], ref[j])``."""
    gtrees = [cKDTree(np.asarray(g, dtype=np.float64)) for g in gen]
    rtrees = [cKDTree(np.asarray(r, dtype=np.float64)) for r in ref]
    D = np.empty((len(gen), len(ref)))
    for i, (g, gt) in enumerate(zip(gen, gtrees)):
        for j, (r, rt) in enumerate(zip(ref, rtrees)):
            d1, _ = rt.query(g)
            d2, _ = gt.query(r)
            D[i, j] = np.mean(d1 ** 2) + np.mean(d2 ** 2)
    return D


def clouds(trees: Sequence[TreeSkeleton], n_points: int = EVAL_POINTS, seed: int = 0) -> list[np.ndarray]:
    """One area-uniform cloud per tree; tree ``i`` uses seed ``seed + i``."""
    return [sample_point_cloud(t, n_points, seed + i) for i, t in enumerate(trees)]


def mmd_cov_from_matrix(D: np.ndarray) -> tuple[float, float]:
    """``D`` is gen x ref.  MMD: mean over ref of the closest gen; COV: share of ref hit by some gen's nearest."""
    mmd = float(D.min(axis=0).mean())
    hits = np.unique(D.argmin(axis=1))
    return mmd, len(hits) / D.shape[1]


def mmd_cov(gen: Sequence[np.ndarray], ref: Sequence[np.ndarray]) -> tuple[float, float]:
    if not len(gen) or not len(ref):
        raise ValueError("mmd_cov needs nonempty generated and reference sets")
    return mmd_cov_from_matrix(chamfer_matrix(gen, ref))


def occupancy(points: np.ndarray, grid: int = JSD_GRID) -> np.ndarray:
    """Normalized histogram of points over ``grid**3`` cells covering [-1,1]^3 (outliers clipped)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cells = np.clip(((pts + 1.0) * 0.5 * grid).astype(np.int64), 0, grid - 1)
    flat = (cells[:, 0] * grid + cells[:, 1]) * grid + cells[:, 2]
    h = np.bincount(flat, minlength=grid ** 3).astype(np.float64)
    return h / max(h.sum(), 1.0)


def jsd_hist(p, q) -> float:
    """Jensen-Shannon divergence of two histograms, natural log."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return max(0.0, 0.5 * kl(p) + 0.5 * kl(q))


def jsd(gen: Sequence[np.ndarray], ref: Sequence[np.ndarray], grid: int = JSD_GRID) -> float:
    """JSD between the pooled occupancy of the two sets of clouds."""
    return jsd_hist(occupancy(np.concatenate(list(gen)), grid), occupancy(np.concatenate(list(ref)), grid))


def default_connect_eps(q: Quantizer | None) -> float:
    """Largest coordinate bin width times sqrt(3), plus the connectivity tolerance."""
    if q is None:
        return EPS_CONNECT
    return float(np.diff(q.coord_edges).max()) * math.sqrt(3.0) + EPS_CONNECT


def connect_score(tree: TreeSkeleton | None, eps: float) -> tuple[float, bool]:
    """Share of non-root branches whose start lies within ``eps`` of an earlier branch's end.

    Branch order is generation order and the first branch is the root.  Returns
    ``(score, empty)``; an empty tree scores 0 with the flag set."""
    if tree is None or tree.n == 0:
        return 0.0, True
    if tree.n == 1:
        return 1.0, False
    s, t = tree.starts, tree.ends
    d = np.linalg.norm(s[1:, None, :] - t[None, :-1, :], axis=-1)  # (n-1, n-1): branch i+1 vs end j
    earlier = np.tril(np.ones_like(d, dtype=bool))
    ok = np.any((d <= eps) & earlier, axis=1)
    return float(ok.sum()) / (tree.n - 1), False


def nearest_threshold(train: Sequence[np.ndarray], percentile: float = 1.0) -> float:
    """Percentile of each training cloud's nearest Chamfer distance to another training cloud."""
    if len(train) < 2:
        return 0.0
    D = chamfer_matrix(train, train)
    np.fill_diagonal(D, np.inf)
    return float(np.percentile(D.min(axis=1), percentile))


def novelty_uniqueness(gen: Sequence[np.ndarray], train: Sequence[np.ndarray], delta: float | None = None
                       ) -> tuple[float, float, float]:
    """``(novel, unique, delta)``.

    Novel: share of gen whose nearest training cloud is farther than ``delta``.
    Unique: gen is clustered greedily, a sample joining the first earlier
    representative within ``delta``; the score is clusters / |gen|, so an
    all-identical set scores 1/|gen|."""
    if delta is None:
        delta = nearest_threshold(train)
    if not len(gen):
        return 0.0, 0.0, delta
    novel = float(np.mean(chamfer_matrix(gen, train).min(axis=1) > delta)) if len(train) else 1.0
    G = chamfer_matrix(gen, gen)
    reps: list[int] = []
    for i in range(len(gen)):
        if not any(G[i, r] <= delta for r in reps):
            reps.append(i)
    return novel, len(reps) / len(gen), delta


@dataclass
class EvalReport:
    connect: float = 0.0
    novel: float = 0.0
    unique: float = 0.0
    mmd_cd: float = 0.0
    cov_cd: float = 0.0
    jsd: float = 0.0
    mean_nll: float = float("nan")
    exp_mean_nll: float = float("nan")
    n_gen: int = 0
    n_ref: int = 0
    n_train: int = 0
    n_empty: int = 0
    config: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, object]]:
        d = asdict(self)
        cfg = d.pop("config")
        return list(d.items()) + [(f"config.{k}", v) for k, v in sorted(cfg.items())]

    def to_csv(self) -> str:
        return "metric,value\n" + "".join(f"{k},{v}\n" for k, v in self.rows())

    def pretty(self) -> str:
        width = max(len(k) for k, _ in self.rows())
        out = []
        for k, v in self.rows():
            out.append(f"{k:<{width}}  {v:.6g}" if isinstance(v, float) else f"{k:<{width}}  {v}")
        return "\n".join(out)


def evaluate(gen: Sequence[TreeSkeleton | None], ref: Sequence[TreeSkeleton], train: Sequence[TreeSkeleton] = (),
             eps: float | None = None, q: Quantizer | None = None, n_points: int = EVAL_POINTS, grid: int = JSD_GRID,
             delta: float | None = None, seed: int = 0) -> EvalReport:
    """Full metric suite.  ``None`` entries in ``gen`` are undecodable samples (Connect 0)."""
    eps = default_connect_eps(q) if eps is None else eps
    scores = [connect_score(t, eps) for t in gen]
    n_empty = sum(flag for _, flag in scores)
    valid = [t for t in gen if t is not None and t.n > 0]
    rep = EvalReport(connect=float(np.mean([s for s, _ in scores])) if scores else 0.0,
                     n_gen=len(gen), n_ref=len(ref), n_train=len(train), n_empty=n_empty)
    gc = clouds(valid, n_points, seed)
    rc = clouds(ref, n_points, seed + 1_000_000)
    tc = clouds(train, n_points, seed + 2_000_000)
    if gc and rc:
        rep.mmd_cd, rep.cov_cd = mmd_cov(gc, rc)
        rep.jsd = jsd(gc, rc, grid)
    if gc:
        rep.novel, rep.unique, delta = novelty_uniqueness(gc, tc, delta)
    rep.config = {"connect_eps": eps, "points_per_tree": n_points, "jsd_grid": grid,
                  "novelty_delta": delta if delta is not None else float("nan"), "seed": seed}
    return rep
