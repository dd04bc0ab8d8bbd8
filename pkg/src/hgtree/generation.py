"""Sampling: unconditional, completion, point-cloud conditioned and growth sequences.

Decoding is KV-cached through :class:`~hgtree.model.IncrementalDecoder`, which
returns the same logits as a full forward over the PAD-extended buffer (the
buffer is always a multiple of 8 long).  ``use_cache=False`` runs that full
forward at every step instead; it is slow and exists as an oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .conditioning import PointCloudEncoder
from .errors import CapacityError, EmptyGenerationError, InvalidParamsError, MalformedGrowthError, ShapeError
from .model import HourglassModel
from .ordering import order_branches
from .tokenizer import (EOS, FRAME, GROUP, N_BINS, PAD, SOS, DecodeStats, Quantizer, TokenSequence,
                        detokenize, quantize_rows, split_frames)
from .tree import GrowthSequence, TreeSkeleton

N_GROWTH_STAGES = GrowthSequence.N_STAGES


@dataclass
class SamplerConfig:
    """Decoding knobs.  ``greedy`` takes the argmax (the temperature -> 0 limit)."""

    temperature: float = 1.0
    top_k: int | None = 50
    max_new_tokens: int | None = None
    seed: int = 0
    greedy: bool = False
    constrained: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidParamsError("temperature must be > 0 (use greedy=True for argmax decoding)")
        if self.top_k is not None and self.top_k < 1:
            raise InvalidParamsError("top_k must be >= 1")
        if self.max_new_tokens is not None and self.max_new_tokens < 0:
            raise InvalidParamsError("max_new_tokens must be >= 0")


@dataclass
class SampleOutput:
    """A finished token buffer.  ``truncated`` is set when the budget ran out before EOS."""

    sequence: TokenSequence
    truncated: bool = False
    n_generated: int = 0
    stages: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def tokens(self) -> np.ndarray:
        return np.asarray(self.sequence.tokens)

    def tree(self, q: Quantizer, species_tag=None) -> TreeSkeleton:
        return detokenize(self.sequence, q, species_tag=species_tag)


def _allowed(tokens: list[int], frame_has_values: bool) -> np.ndarray:
    """Grammar mask for the next token given the frame so far."""
    ok = np.zeros(PAD + 1, dtype=bool)
    ok[:N_BINS] = True
    if len(tokens) % GROUP == 0 and frame_has_values:
        ok[EOS] = True
    return ok


def _choose(logits: np.ndarray, ok: np.ndarray | None, cfg: SamplerConfig, rng: np.random.Generator) -> int:
    z = np.asarray(logits, dtype=np.float64).copy()
    if ok is not None:
        z[~ok[: len(z)]] = -np.inf
    if cfg.greedy:
        return int(np.argmax(z))
    z /= cfg.temperature
    if cfg.top_k is not None and cfg.top_k < np.isfinite(z).sum():
        kth = np.partition(z, -cfg.top_k)[-cfg.top_k]
        z[z < kth] = -np.inf
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


class _Stepper:
    """Uniform interface over cached and uncached next-token logits."""

    def __init__(self, model: HourglassModel, prefix: np.ndarray | None, use_cache: bool):
        self.model = model
        self.prefix = prefix
        self.use_cache = use_cache
        self.tokens: list[int] = []
        if use_cache:
            self.dec = model.incremental(1)
            if prefix is not None:
                self.dec.feed_prefix(prefix)

    def feed(self, token: int) -> np.ndarray | None:
        self.tokens.append(int(token))
        if self.use_cache:
            return self.dec.step(token)
        return None

    def logits(self, cached: np.ndarray | None) -> np.ndarray:
        if self.use_cache:
            return cached[0]
        cfg = self.model.cfg
        n = len(self.tokens)
        align = max(cfg.reduction, GROUP)
        L = min(cfg.context, -(-max(n, 1) // align) * align)
        buf = np.full((1, L), PAD, dtype=np.int64)
        buf[0, :n] = self.tokens
        pre = None if self.prefix is None else ag.Tensor(self.prefix)
        return self.model.logits_numpy(buf, pre, crop=True)[0, n - 1]


def _decode(model: HourglassModel, prompt, cfg: SamplerConfig, prefix: np.ndarray | None = None,
            frames: int = 1, use_cache: bool = True) -> SampleOutput:
    """Extend ``prompt`` until ``frames`` SOS...EOS frames are closed or the budget runs out.

    Under the grammar constraint, positions inside a group only admit value
    tokens and EOS is only admitted at a group boundary once the current frame
    holds a branch.  A sampled EOS is completed to a full EOS block, and in
    multi-frame mode a fresh SOS block is forced in for the next frame."""
    context = model.cfg.context
    buf = [int(t) for t in prompt]
    if not buf or buf[0] != SOS:
        raise InvalidParamsError("prompt must begin with SOS")
    if len(buf) > context:
        raise CapacityError(f"prompt of {len(buf)} tokens exceeds context {context}")
    rng = np.random.default_rng(cfg.seed)
    st = _Stepper(model, prefix, use_cache)
    last = None
    for t in buf:
        last = st.feed(t)

    # frame state implied by the prompt
    closed = sum(1 for i in range(1, len(buf)) if buf[i] == EOS and buf[i - 1] != EOS)
    has_values = buf[-1] < N_BINS
    pending: list[int] = []
    if buf[-1] in (SOS, EOS) and len(buf) % FRAME:
        pending = [buf[-1]] * (FRAME - len(buf) % FRAME)
    if buf[-1] == EOS and closed < frames:
        pending += [SOS] * FRAME

    budget = context - len(buf)
    if cfg.max_new_tokens is not None:
        budget = min(budget, cfg.max_new_tokens)
    produced, truncated = 0, False
    while closed < frames or pending:
        if produced >= budget:
            truncated = True
            break
        if pending:
            tok = pending.pop(0)
        else:
            ok = _allowed(buf, has_values) if cfg.constrained else None
            tok = _choose(st.logits(last), ok, cfg, rng)
        if tok == EOS and buf[-1] != EOS:
            closed += 1
            if len(buf) % GROUP == 0:
                pending = [EOS] * (FRAME - 1) + ([SOS] * FRAME if closed < frames else [])
            else:
                # an unconstrained EOS inside a group ends the sample; the partial group is dropped on decode
                closed = frames
        if tok == PAD:
            closed = frames
            pending = []
        has_values = tok < N_BINS or (has_values and tok == EOS)
        buf.append(tok)
        produced += 1
        if (closed < frames or pending) and len(buf) < context:
            last = st.feed(tok)

    L = context if len(buf) <= context else -(-len(buf) // GROUP) * GROUP
    out = np.full(L, PAD, dtype=np.int64)
    out[: len(buf)] = buf
    n_values = int(np.sum(out < N_BINS))
    return SampleOutput(TokenSequence(out, n_values // GROUP), truncated, produced, closed)


def sample_unconditional(model: HourglassModel, cfg: SamplerConfig | None = None, use_cache: bool = True) -> SampleOutput:
    """Sample one tree sequence starting from the 8-SOS block."""
    cfg = cfg or SamplerConfig()
    if model.cfg.prefix:
        raise ShapeError("model expects a conditioning prefix; use sample_conditional")
    return _decode(model, [SOS] * FRAME, cfg, use_cache=use_cache)


def prompt_tokens(partial: TreeSkeleton, q: Quantizer, order="dfs", close: bool = False) -> list[int]:
    """SOS block plus the ordered value groups of ``partial`` (plus an EOS block if ``close``)."""
    perm = order_branches(partial, order)
    ids = quantize_rows(partial.data[list(perm.order)], q).reshape(-1)
    toks = [SOS] * FRAME + [int(t) for t in ids]
    if close:
        toks += [EOS] * FRAME
    return toks


def complete(model: HourglassModel, partial: TreeSkeleton, q: Quantizer, cfg: SamplerConfig | None = None,
             n_samples: int = 1, order="dfs", close: bool = False) -> list[TreeSkeleton]:
    """Continue ``partial`` autoregressively; sample ``k`` uses seed ``cfg.seed + k``."""
    return [out.tree(q, partial.species_tag)
            for out in complete_sequences(model, partial, q, cfg, n_samples, order, close)]


def complete_sequences(model: HourglassModel, partial: TreeSkeleton, q: Quantizer, cfg: SamplerConfig | None = None,
                       n_samples: int = 1, order="dfs", close: bool = False) -> list[SampleOutput]:
    cfg = cfg or SamplerConfig()
    toks = prompt_tokens(partial, q, order, close)
    outs = []
    for k in range(n_samples):
        kcfg = SamplerConfig(cfg.temperature, cfg.top_k, cfg.max_new_tokens, cfg.seed + k, cfg.greedy, cfg.constrained)
        outs.append(_decode(model, toks, kcfg))
    return outs


def encode_point_cloud(encoder: PointCloudEncoder, points) -> np.ndarray:
    """Points ``(n_points, 3)`` or ``(B, n_points, 3)`` -> prefix ``(B, slots, dim)``."""
    with ag.no_grad():
        return encoder.encode(points).data


def sample_conditional(model: HourglassModel, prefix, cfg: SamplerConfig | None = None,
                       use_cache: bool = True) -> SampleOutput:
    cfg = cfg or SamplerConfig()
    prefix = np.asarray(prefix, dtype=model.dtype)
    if prefix.ndim == 2:
        prefix = prefix[None]
    if prefix.shape != (1, model.cfg.prefix, model.cfg.dim):
        raise ShapeError(f"prefix shape {prefix.shape} does not match model prefix ({model.cfg.prefix}, {model.cfg.dim})")
    return _decode(model, [SOS] * FRAME, cfg, prefix=prefix, use_cache=use_cache)


def sample_growth(model: HourglassModel, q: Quantizer, cfg: SamplerConfig | None = None) -> tuple[GrowthSequence, SampleOutput]:
    """Generate the ten concatenated stage frames and decode each one."""
    cfg = cfg or SamplerConfig()
    out = _decode(model, [SOS] * FRAME, cfg, frames=N_GROWTH_STAGES)
    stages = []
    for frame in split_frames(out.tokens):
        try:
            stages.append(detokenize(frame, q, DecodeStats()))
        except EmptyGenerationError:
            break
    if len(stages) < N_GROWTH_STAGES:
        raise MalformedGrowthError(f"recovered {len(stages)} of {N_GROWTH_STAGES} stage frames", recovered=len(stages))
    return GrowthSequence(tuple(stages[:N_GROWTH_STAGES])), out
