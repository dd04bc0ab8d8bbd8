"""AdamW, the warmup + cosine schedule, gradient clipping and checkpoint files."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidScheduleError, NonFiniteError

CHECKPOINT_MAGIC = b"HGTCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass
class OptimizerState:
    lr: float = 5e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float | None = None) -> None:
    """In-place AdamW update of ``params`` (name -> Tensor) from ``grads`` (name -> array).

    Weight decay is decoupled: ``p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


def lr_schedule(step: int, warmup_steps: int, total_steps: int, peak_lr: float) -> float:
    """Linear warmup 0 -> peak, then cosine annealing peak -> 0 at ``total_steps``."""
    if warmup_steps >= total_steps:
        raise InvalidScheduleError(f"warmup ({warmup_steps}) must be shorter than total ({total_steps})")
    step = min(max(step, 0), total_steps)
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * peak_lr * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= scale
    return total


# ---- checkpoint file -------------------------------------------------------------
#
# layout:  MAGIC | u64 little-endian header length | JSON header | raw blobs
# header:  {"version", "meta", "entries": [{"name", "dtype", "shape", "offset", "nbytes"}]}
# blobs are C-order little-endian arrays; optimizer moments are stored under
# "opt.m/<param>" and "opt.v/<param>".


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": CHECKPOINT_VERSION, "meta": meta, "entries": entries}, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    base = 16 + hlen
    arrays = {}
    for e in header["entries"]:
        buf = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]
