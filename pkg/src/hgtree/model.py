"""Hourglass causal transformer (and its plain / single-stage ablations).

Layout for the two-stage variants, with L the internal sequence length::

    embed + pos(L) -> enc block @L -> shift, pool/4 -> enc block @L/4 -> shift, pool/2
      -> bottleneck blocks @L/8 (optionally U-Net linked, scaled by alpha)
      -> repeat x2, delay 1, + enc@L/4 -> dec block @L/4
      -> repeat x4, delay 1, + enc@L   -> dec block @L -> norm -> vocab logits

Causality: a pooled group aggregates positions up to ``g*k + k-1 - down_shift``
and, after duplication and a ``skip_shift`` delay, is first read at position
``g*k + skip_shift``.  The model is causal iff ``down_shift + skip_shift >= k-1``
at every stage; the defaults split this as ``k-2`` and ``1``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import InternalStateError, ShapeError
from .tokenizer import VOCAB_SIZE

VARIANTS = ("PT", "HG1", "HG2", "HG2R", "HG2RL")
STAGE_FACTORS = {"PT": (), "HG1": (4,), "HG2": (4, 2), "HG2R": (4, 2), "HG2RL": (4, 2)}


@dataclass
class ModelConfig:
    variant: str = "HG2RL"
    vocab: int = VOCAB_SIZE
    dim: int = 128
    heads: int = 4
    total_layers: int = 24
    context: int = 1616
    prefix: int = 0
    mlp_ratio: int = 4
    # per-stage right shift before pooling; None -> k-2 (at least 0)
    down_shift: tuple[int, ...] | None = None
    # delay applied to the duplicated low-resolution stream before the encoder skip
    skip_shift: int = 1
    boundary: str = "learned"
    dtype: str = "float32"
    seed: int = 0
    allow_acausal: bool = False

    def __post_init__(self):
        self.variant = self.variant.upper().replace("+", "")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant}")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.context % 8 or self.prefix % 8:
            raise ShapeError("context and prefix lengths must be multiples of 8")
        if self.boundary not in ("learned", "zero"):
            raise ValueError("boundary must be 'learned' or 'zero'")
        if self.down_shift is None:
            self.down_shift = tuple(max(k - 2, 0) for k in self.factors)
        self.down_shift = tuple(int(d) for d in self.down_shift)
        if len(self.down_shift) != len(self.factors):
            raise ValueError("down_shift needs one entry per downsampling stage")
        if self.bottleneck_layers < 1:
            raise ValueError(f"total_layers={self.total_layers} leaves no bottleneck layer")
        if not self.allow_acausal:
            for k, d in zip(self.factors, self.down_shift):
                if d + self.skip_shift < k - 1:
                    raise ValueError(
                        f"down_shift {d} + skip_shift {self.skip_shift} < {k - 1}: "
                        "the model would see future tokens (set allow_acausal to build it anyway)"
                    )

    @property
    def factors(self) -> tuple[int, ...]:
        return STAGE_FACTORS[self.variant]

    @property
    def reduction(self) -> int:
        return int(np.prod(self.factors)) if self.factors else 1

    @property
    def bottleneck_layers(self) -> int:
        return self.total_layers - 2 * len(self.factors)

    @property
    def linked(self) -> bool:
        return self.variant in ("HG2R", "HG2RL")

    @property
    def length(self) -> int:
        return self.prefix + self.context

    def stage_lengths(self, length: int | None = None) -> list[int]:
        """Token counts per stage, encoder to decoder (the shape ladder)."""
        n = self.length if length is None else length
        down = [n]
        for k in self.factors:
            down.append(down[-1] // k)
        return down + down[-2::-1]

    def attention_cost(self, length: int | None = None) -> int:
        """Sum over layers of (stage length)^2."""
        n = self.length if length is None else length
        lens = [n]
        for k in self.factors:
            lens.append(lens[-1] // k)
        outer = 2 * sum(l * l for l in lens[:-1])
        return outer + self.bottleneck_layers * lens[-1] ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["down_shift"] = list(self.down_shift)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if kw.get("down_shift") is not None:
            kw["down_shift"] = tuple(kw["down_shift"])
        return cls(**kw)


def _block_names(cfg: ModelConfig) -> dict[str, list[str]]:
    n_stage = len(cfg.factors)
    return {
        "enc": [f"enc{i}" for i in range(n_stage)],
        "mid": [f"mid{i}" for i in range(cfg.bottleneck_layers)],
        "dec": [f"dec{i}" for i in range(n_stage)],
    }


def linked_pairs(cfg: ModelConfig) -> list[tuple[int, int]]:
    """(receiving bottleneck layer, mirrored source layer), 0-based."""
    if not cfg.linked:
        return []
    nb = cfg.bottleneck_layers
    half = nb // 2
    return [(j, nb - 1 - j) for j in range(nb - half, nb)]


class HourglassModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.names = _block_names(cfg)
        self.params: dict[str, Tensor] = {}
        if params is None:
            self._init(np.random.default_rng(cfg.seed))
        else:
            self.load_arrays(params)

    # ---- parameters ----------------------------------------------------------
    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True, name=name)

    def _init(self, rng: np.random.Generator) -> None:
        cfg, D = self.cfg, self.cfg.dim
        std = 0.02
        out_std = std / math.sqrt(2 * cfg.total_layers)
        self._add("tok_emb", rng.normal(0, std, (cfg.vocab, D)))
        n = cfg.length
        for lvl in range(len(cfg.factors) + 1):
            self._add(f"pos{lvl}", rng.normal(0, std, (n, D)))
            if lvl < len(cfg.factors):
                n //= cfg.factors[lvl]
        if cfg.boundary == "learned":
            for lvl in range(len(cfg.factors)):
                self._add(f"boundary{lvl}", rng.normal(0, std, (D,)))
        H = cfg.mlp_ratio * D
        for group in ("enc", "mid", "dec"):
            for b in self.names[group]:
                self._add(f"{b}.ln1.g", np.ones(D))
                self._add(f"{b}.ln1.b", np.zeros(D))
                self._add(f"{b}.qkv.w", rng.normal(0, std, (D, 3 * D)))
                self._add(f"{b}.qkv.b", np.zeros(3 * D))
                self._add(f"{b}.proj.w", rng.normal(0, out_std, (D, D)))
                self._add(f"{b}.proj.b", np.zeros(D))
                self._add(f"{b}.ln2.g", np.ones(D))
                self._add(f"{b}.ln2.b", np.zeros(D))
                self._add(f"{b}.fc1.w", rng.normal(0, std, (D, H)))
                self._add(f"{b}.fc1.b", np.zeros(H))
                self._add(f"{b}.fc2.w", rng.normal(0, out_std, (H, D)))
                self._add(f"{b}.fc2.b", np.zeros(D))
        if cfg.variant == "HG2RL":
            for j, _ in linked_pairs(cfg):
                self._add(f"alpha{j}", np.zeros(D))
        self._add("ln_f.g", np.ones(D))
        self._add("ln_f.b", np.zeros(D))
        self._add("head.w", rng.normal(0, std, (D, cfg.vocab)))
        self._add("head.b", np.zeros(cfg.vocab))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self._add(k, v)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: p.grad for k, p in self.params.items()}

    def clone(self, dtype: str | None = None) -> "HourglassModel":
        cfg = ModelConfig.from_dict(self.cfg.to_dict())
        if dtype is not None:
            cfg.dtype = dtype
        return HourglassModel(cfg, {k: v.copy() for k, v in self.arrays().items()})

    # ---- building blocks -------------------------------------------------------
    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def block(self, name: str, x: Tensor, cache: "KVCache | None" = None) -> Tensor:
        """Pre-norm causal self-attention + MLP, both residual.

        With ``cache``, ``x`` holds only new positions; their keys/values are
        appended and they attend to everything cached before them."""
        B, T, D = x.shape
        Hh = self.cfg.heads
        dh = D // Hh
        h = ag.layer_norm(x, self._p(f"{name}.ln1.g"), self._p(f"{name}.ln1.b"))
        qkv = ag.linear(h, self._p(f"{name}.qkv.w"), self._p(f"{name}.qkv.b"))
        qkv = ag.transpose(ag.reshape(qkv, (B, T, 3, Hh, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        if cache is None:
            att = ag.attention(q, k, v, ag.causal_mask(T, T))
        else:
            k_all, v_all = cache.append(name, k.data, v.data)
            mask = ag.causal_mask(T, k_all.shape[-2]) if T > 1 else None
            att = ag.attention(q, Tensor(k_all), Tensor(v_all), mask)
        att = ag.reshape(ag.transpose(att, (0, 2, 1, 3)), (B, T, D))
        x = x + ag.linear(att, self._p(f"{name}.proj.w"), self._p(f"{name}.proj.b"))
        h = ag.layer_norm(x, self._p(f"{name}.ln2.g"), self._p(f"{name}.ln2.b"))
        h = ag.gelu(ag.linear(h, self._p(f"{name}.fc1.w"), self._p(f"{name}.fc1.b")))
        return x + ag.linear(h, self._p(f"{name}.fc2.w"), self._p(f"{name}.fc2.b"))

    def bottleneck(self, x: Tensor) -> Tensor:
        links = dict(linked_pairs(self.cfg))
        outs: list[Tensor] = []
        for j, name in enumerate(self.names["mid"]):
            if j in links:
                src = outs[links[j]]
                if self.cfg.variant == "HG2RL":
                    x = x + ag.mul(src, self._p(f"alpha{j}"))
                else:
                    x = x + src
            x = self.block(name, x)
            outs.append(x)
        return x

    def downsample(self, x: Tensor, level: int) -> Tensor:
        k, d = self.cfg.factors[level], self.cfg.down_shift[level]
        fill = self._p(f"boundary{level}") if self.cfg.boundary == "learned" else None
        x = ag.shift(x, d, fill, axis=1)
        return ag.mean_pool(x, k, axis=1)

    def upsample(self, x: Tensor, skip: Tensor | None, level: int) -> Tensor:
        """Duplicate each token k times, delay by ``skip_shift``, add the encoder skip."""
        if skip is None:
            raise InternalStateError(f"missing encoder activation for stage {level}")
        x = ag.repeat_expand(x, self.cfg.factors[level], axis=1)
        x = ag.shift(x, self.cfg.skip_shift, None, axis=1)
        return x + skip

    def embed(self, tokens: np.ndarray, prefix: Tensor | None) -> Tensor:
        x = ag.embedding(self._p("tok_emb"), tokens)
        if self.cfg.prefix:
            if prefix is None:
                prefix = Tensor(np.zeros((tokens.shape[0], self.cfg.prefix, self.cfg.dim), dtype=self.dtype))
            if prefix.shape != (tokens.shape[0], self.cfg.prefix, self.cfg.dim):
                raise ShapeError(f"prefix shape {prefix.shape} does not match config prefix {self.cfg.prefix}")
            x = ag.concat([prefix, x], axis=1)
        elif prefix is not None:
            raise ShapeError("model was configured without a conditioning prefix")
        return x

    # ---- full forward ---------------------------------------------------------
    def hidden(self, tokens, prefix: Tensor | None = None, crop: bool = False) -> Tensor:
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        L = tokens.shape[1]
        cfg = self.cfg
        if crop:
            if L > cfg.context or (cfg.prefix + L) % cfg.reduction:
                raise ShapeError(f"length {L} must be <= {cfg.context} and keep alignment {cfg.reduction}")
        elif L != cfg.context:
            raise ShapeError(f"sequence length {L} != context length {cfg.context}")
        n = cfg.prefix + L
        x = self.embed(tokens, prefix)
        x = x + self._p("pos0")[:n]
        skips = []
        for lvl, name in enumerate(self.names["enc"]):
            x = self.block(name, x)
            skips.append(x)
            x = self.downsample(x, lvl)
            n //= cfg.factors[lvl]
            x = x + self._p(f"pos{lvl + 1}")[:n]
        x = self.bottleneck(x)
        for lvl in reversed(range(len(cfg.factors))):
            x = self.upsample(x, skips[lvl], lvl)
            x = self.block(self.names["dec"][lvl], x)
        return x

    def head(self, x: Tensor) -> Tensor:
        x = ag.layer_norm(x, self._p("ln_f.g"), self._p("ln_f.b"))
        return ag.linear(x, self._p("head.w"), self._p("head.b"))

    def forward(self, tokens, prefix: Tensor | None = None, crop: bool = False) -> Tensor:
        """Logits ``(B, L, vocab)``; row i scores the token at position i+1."""
        x = self.hidden(tokens, prefix, crop)
        if self.cfg.prefix:
            x = x[:, self.cfg.prefix:]
        return self.head(x)

    __call__ = forward

    def logits_numpy(self, tokens, prefix=None, crop=False) -> np.ndarray:
        with ag.no_grad():
            return self.forward(tokens, prefix, crop).data

    def incremental(self, batch: int = 1) -> "IncrementalDecoder":
        return IncrementalDecoder(self, batch)


# ---- incremental (KV-cached) decoding --------------------------------------------


class KVCache:
    def __init__(self):
        self.k: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def append(self, name: str, k: np.ndarray, v: np.ndarray):
        if name in self.k:
            self.k[name] = np.concatenate([self.k[name], k], axis=-2)
            self.v[name] = np.concatenate([self.v[name], v], axis=-2)
        else:
            self.k[name], self.v[name] = k, v
        return self.k[name], self.v[name]

    def length(self, name: str) -> int:
        return self.k[name].shape[-2] if name in self.k else 0


class IncrementalDecoder:
    """Feeds one internal position at a time and returns that position's logits.

    Pooled groups are computed once, as soon as every position they cover is
    known; decoder positions are emitted as soon as their inputs exist.  This
    reproduces the full forward pass exactly because every value consumed by
    position i is itself a function of positions <= i only."""

    def __init__(self, model: HourglassModel, batch: int = 1):
        self.m = model
        self.cfg = model.cfg
        self.B = batch
        self.cache = KVCache()
        n_stage = len(self.cfg.factors)
        self.enc = [[] for _ in range(n_stage + 1)]  # encoder-stream outputs per level (deepest = core)
        self.dec = [[] for _ in range(n_stage)]
        self.pos = 0
        self._mid_outs: list[list[np.ndarray]] = []

    def _t(self, arr) -> Tensor:
        return Tensor(arr)

    def _core(self, x: Tensor) -> np.ndarray:
        links = dict(linked_pairs(self.cfg))
        outs = []
        for j, name in enumerate(self.m.names["mid"]):
            if j in links:
                src = outs[links[j]]
                if self.cfg.variant == "HG2RL":
                    x = x + ag.mul(src, self.m._p(f"alpha{j}"))
                else:
                    x = x + src
            x = self.m.block(name, x, self.cache)
            outs.append(x)
        return x.data

    def _arrive(self, level: int, x: np.ndarray) -> None:
        """A new (position-embedded) input at ``level``; run the encoder stream onward."""
        cfg = self.cfg
        n_stage = len(cfg.factors)
        if level == n_stage:
            self.enc[level].append(self._core(self._t(x)))
            return
        e = self.m.block(self.m.names["enc"][level], self._t(x), self.cache).data
        self.enc[level].append(e)
        k, d = cfg.factors[level], cfg.down_shift[level]
        idx = len(self.enc[level]) - 1
        # groups whose last covered encoder index is idx
        g_num = idx + d - k + 1
        if g_num < 0 or g_num % k:
            return
        g = g_num // k
        members = []
        for j in range(g * k, g * k + k):
            if j < d:
                if cfg.boundary == "learned":
                    members.append(np.broadcast_to(self.m._p(f"boundary{level}").data, (self.B, 1, cfg.dim)))
                else:
                    members.append(np.zeros((self.B, 1, cfg.dim), dtype=self.m.dtype))
            else:
                members.append(self.enc[level][j - d])
        pooled = np.concatenate(members, axis=1).mean(axis=1, keepdims=True)
        pooled = pooled + self.m._p(f"pos{level + 1}").data[g]
        self._arrive(level + 1, pooled)

    def _emit_decoder(self, level: int) -> None:
        cfg = self.cfg
        n_stage = len(cfg.factors)
        k, u = cfg.factors[level], cfg.skip_shift
        below = self.enc[n_stage] if level == n_stage - 1 else self.dec[level + 1]
        while len(self.dec[level]) < len(self.enc[level]):
            p = len(self.dec[level])
            if p < u:
                up = np.zeros((self.B, 1, cfg.dim), dtype=self.m.dtype)
            else:
                src = (p - u) // k
                if src >= len(below):
                    break
                up = below[src]
            x = self._t(up + self.enc[level][p])
            self.dec[level].append(self.m.block(self.m.names["dec"][level], x, self.cache).data)

    def step(self, token=None, embedding: np.ndarray | None = None) -> np.ndarray:
        """Consume one position (a token id per batch row, or a raw embedding) -> logits (B, vocab)."""
        i = self.pos
        if i >= self.cfg.length:
            raise ShapeError("context exhausted")
        with ag.no_grad():
            if embedding is None:
                ids = np.broadcast_to(np.asarray(token, dtype=np.int64).reshape(-1, 1), (self.B, 1))
                x = self.m._p("tok_emb").data[ids]
            else:
                x = np.asarray(embedding, dtype=self.m.dtype).reshape(self.B, 1, self.cfg.dim)
            x = x + self.m._p("pos0").data[i]
            self._arrive(0, x)
            n_stage = len(self.cfg.factors)
            for lvl in reversed(range(n_stage)):
                self._emit_decoder(lvl)
            top = self.dec[0] if n_stage else self.enc[0]
            if len(top) <= i:
                raise InternalStateError(f"position {i} is not computable yet (acausal configuration?)")
            out = self.m.head(self._t(top[i])).data[:, 0]
        self.pos += 1
        return out

    def feed_prefix(self, prefix: np.ndarray) -> None:
        for j in range(self.cfg.prefix):
            self.step(embedding=prefix[:, j])
