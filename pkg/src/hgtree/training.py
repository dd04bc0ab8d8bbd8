"""Autoregressive training: data encoding with augmentation, masked loss, AdamW loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .conditioning import PointCloudEncoder
from .errors import EmptyLossError, InvalidParamsError, NonFiniteError
from .model import HourglassModel, ModelConfig
from .optim import OptimizerState, adamw_step, clip_grad_norm, load_checkpoint, lr_schedule, save_checkpoint
from .tokenizer import EOS, GROUP, N_BINS, PAD, SOS, Quantizer, encode_tree, tokenize_growth
from .tree import GrowthSequence, TreeSkeleton, augment, sample_point_cloud

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 20
    peak_lr: float = 5e-3
    warmup_epochs: int = 5
    weight_decay: float = 0.01
    augment: bool = True
    order: str = "dfs"
    seed: int = 0
    n_max: int = 200
    grad_clip: float = 1.0
    # "first-eos": value tokens + first EOS per frame; "all": every non-PAD target
    loss_mask: str = "first-eos"
    growth: bool = False
    growth_stage_n_max: int = 200
    n_points: int = 200
    log_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidParamsError("batch_size must be >= 1")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise InvalidParamsError("warmup_epochs must be smaller than epochs")
        if self.loss_mask not in ("first-eos", "all"):
            raise InvalidParamsError("loss_mask must be 'first-eos' or 'all'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def loss_mask(targets: np.ndarray, policy: str = "first-eos") -> np.ndarray:
    """True where a target token counts toward the loss.

    ``first-eos``: value tokens and the first EOS after each run of values.
    SOS targets, trailing EOS and PAD are excluded."""
    targets = np.asarray(targets)
    if policy == "all":
        return targets != PAD
    mask = targets < N_BINS
    prev = np.concatenate([np.full(targets.shape[:-1] + (1,), PAD), targets[..., :-1]], axis=-1)
    mask |= (targets == EOS) & (prev < N_BINS)
    return mask


def nll_loss(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is True."""
    return ag.cross_entropy(logits, targets, mask)


def _crop_length(tokens: np.ndarray, align: int) -> int:
    nonpad = np.flatnonzero((tokens != PAD).any(axis=0))
    n = int(nonpad[-1]) + 1 if nonpad.size else align
    return min(tokens.shape[1], int(math.ceil(n / align) * align))


@dataclass
class Example:
    tokens: np.ndarray
    points: np.ndarray | None = None


class Corpus:
    """Normalized trees or growth sequences plus what is needed to tokenize them."""

    def __init__(self, items: Sequence, quantizer: Quantizer, tcfg: TrainConfig, context: int):
        self.items = list(items)
        self.q = quantizer
        self.tcfg = tcfg
        self.context = context

    def __len__(self) -> int:
        return len(self.items)

    def encode(self, i: int, rng: np.random.Generator | None, with_points: bool = False) -> Example:
        item = self.items[i]
        theta, mirror = 0.0, False
        if rng is not None and self.tcfg.augment:
            theta = float(rng.uniform(0.0, 2 * math.pi))
            mirror = bool(rng.random() < 0.5)
        if isinstance(item, GrowthSequence):
            if theta or mirror:
                item = GrowthSequence(tuple(augment(s, theta, mirror, renormalize=False) for s in item.stages))
                item = _refit_growth(item)
            seq = tokenize_growth(item, self.tcfg.order, self.q, self.tcfg.growth_stage_n_max, self.context)
            tree = item.final
        else:
            tree = augment(item, theta, mirror) if (theta or mirror) else item
            seq = encode_tree(tree, self.tcfg.order, self.q, self.tcfg.n_max)
        points = None
        if with_points:
            seed = None if rng is None else int(rng.integers(2**63))
            points = sample_point_cloud(tree, self.tcfg.n_points, seed if seed is not None else i)
        return Example(np.asarray(seq.tokens), points)


def _refit_growth(gs: GrowthSequence) -> GrowthSequence:
    from .tree import normalize

    final = gs.final
    if np.abs(final.points()).max() <= 1.0:
        return gs
    _, xf = normalize(final)
    return GrowthSequence(tuple(xf.apply(s) for s in gs.stages))


def batch_loss(model: HourglassModel, tokens: np.ndarray, policy: str,
               encoder: PointCloudEncoder | None = None, points=None) -> tuple[Tensor, int]:
    align = model.cfg.reduction if model.cfg.factors else 8
    L = _crop_length(tokens, max(align, 8))
    tokens = tokens[:, :L]
    prefix = encoder.encode(points) if encoder is not None else None
    logits = model.forward(tokens, prefix, crop=True)
    targets = tokens[:, 1:]
    mask = loss_mask(targets, policy)
    loss = nll_loss(logits[:, :-1], targets, mask)
    return loss, int(mask.sum())


@dataclass
class TrainResult:
    model: HourglassModel
    log: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    encoder: PointCloudEncoder | None = None


def all_params(model: HourglassModel, encoder: PointCloudEncoder | None) -> dict[str, Tensor]:
    params = dict(model.params)
    if encoder is not None:
        params.update(encoder.params)
    return params


def save_training_checkpoint(path, model, opt: OptimizerState, tcfg: TrainConfig, encoder=None, extra=None):
    arrays = {k: v.data for k, v in all_params(model, encoder).items()}
    for k, m in opt.m.items():
        arrays[f"opt.m/{k}"] = m
        arrays[f"opt.v/{k}"] = opt.v[k]
    meta = {
        "model": model.cfg.to_dict(),
        "train": tcfg.to_dict(),
        "opt": {"lr": opt.lr, "betas": list(opt.betas), "eps": opt.eps, "weight_decay": opt.weight_decay, "step": opt.step},
        "encoder": None if encoder is None else {"dim": encoder.dim, "heads": encoder.heads, "n_points": encoder.n_points,
                                                 "n_queries": encoder.n_queries, "slots": encoder.slots},
    }
    if extra:
        meta.update(extra)
    save_checkpoint(path, arrays, meta)


def load_model(path) -> tuple[HourglassModel, PointCloudEncoder | None, dict]:
    arrays, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model"])
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith(("opt.", "pc."))}
    model = HourglassModel(cfg, model_arrays)
    encoder = None
    if meta.get("encoder"):
        e = meta["encoder"]
        enc_arrays = {k: v for k, v in arrays.items() if k.startswith("pc.")}
        encoder = PointCloudEncoder(e["dim"], e["heads"], e["n_points"], e["n_queries"], e["slots"], cfg.dtype, params=enc_arrays)
    return model, encoder, meta


def train(corpus: Corpus, tcfg: TrainConfig, mcfg: ModelConfig, out_dir=None,
          encoder: PointCloudEncoder | None = None, max_steps: int | None = None,
          model: HourglassModel | None = None, callback=None) -> TrainResult:
    """Train for ``tcfg.epochs`` epochs (or ``max_steps`` optimizer steps, whichever is first)."""
    rng = np.random.default_rng(tcfg.seed)
    model = model if model is not None else HourglassModel(mcfg)
    if mcfg.prefix and encoder is None:
        encoder = PointCloudEncoder(mcfg.dim, mcfg.heads, tcfg.n_points, dtype=mcfg.dtype, seed=tcfg.seed + 1)
    params = all_params(model, encoder)
    opt = OptimizerState(lr=tcfg.peak_lr, weight_decay=tcfg.weight_decay)
    result = TrainResult(model, encoder=encoder)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if tcfg.epochs == 0 or len(corpus) == 0:
        if out_dir is not None:
            path = out_dir / "ckpt_epoch000.bin"
            save_training_checkpoint(path, model, opt, tcfg, encoder)
            result.checkpoints.append(path)
        return result

    steps_per_epoch = math.ceil(len(corpus) / tcfg.batch_size)
    total = tcfg.epochs * steps_per_epoch
    warmup = tcfg.warmup_epochs * steps_per_epoch
    if max_steps is not None:
        total = min(total, max_steps)
        warmup = min(warmup, max(total - 1, 0))
    decay = {k for k in params if k.endswith(".w") or k in ("tok_emb",)}
    log_fh = None
    writer = None
    if out_dir is not None:
        log_fh = open(out_dir / "metrics.csv", "a", newline="")
        writer = csv.writer(log_fh)
        if log_fh.tell() == 0:
            writer.writerow(["step", "epoch", "lr", "loss", "tokens_per_sec"])
    step = 0
    try:
        for epoch in range(tcfg.epochs):
            perm = rng.permutation(len(corpus))
            for b0 in range(0, len(corpus), tcfg.batch_size):
                if step >= total:
                    break
                idx = perm[b0:b0 + tcfg.batch_size]
                t0 = time.perf_counter()
                examples = [corpus.encode(int(i), rng, with_points=encoder is not None) for i in idx]
                tokens = np.stack([e.tokens for e in examples])
                points = np.stack([e.points for e in examples]) if encoder is not None else None
                lr = lr_schedule(step, warmup, total, tcfg.peak_lr) if warmup < total else tcfg.peak_lr
                loss, n_tok = batch_loss(model, tokens, tcfg.loss_mask, encoder, points)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteError(f"non-finite loss {value} at epoch {epoch}, batch {b0 // tcfg.batch_size}, lr {lr:.3g}")
                for p in params.values():
                    p.grad = None
                loss.backward()
                grads = {k: p.grad for k, p in params.items()}
                if tcfg.grad_clip:
                    clip_grad_norm(grads, tcfg.grad_clip)
                _adamw_selective(params, grads, opt, lr, decay)
                dt = time.perf_counter() - t0
                step += 1
                row = {"step": step, "epoch": epoch, "lr": lr, "loss": value, "tokens_per_sec": n_tok / max(dt, 1e-9)}
                result.log.append(row)
                if writer is not None:
                    writer.writerow([row[k] for k in ("step", "epoch", "lr", "loss", "tokens_per_sec")])
                if callback is not None:
                    callback(row)
                if tcfg.log_every and step % tcfg.log_every == 0:
                    log.info("step %d epoch %d lr %.3g loss %.4f", step, epoch, lr, value)
            if out_dir is not None:
                path = out_dir / f"ckpt_epoch{epoch + 1:03d}.bin"
                save_training_checkpoint(path, model, opt, tcfg, encoder)
                result.checkpoints.append(path)
            if step >= total:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    return result


def _adamw_selective(params, grads, opt: OptimizerState, lr: float, decay: set[str]) -> None:
    """AdamW with weight decay only on matrices (not norms, biases, positions or alphas)."""
    wd = opt.weight_decay
    if wd:
        for k in decay:
            params[k].data *= 1.0 - lr * wd
    opt.weight_decay = 0.0
    try:
        adamw_step(params, grads, opt, lr)
    finally:
        opt.weight_decay = wd


def perplexity(model: HourglassModel, corpus: Corpus, batch_size: int = 8, policy: str | None = None,
               encoder: PointCloudEncoder | None = None) -> tuple[float, float]:
    """(mean NLL per unmasked token, exp of it) over an un-augmented corpus."""
    policy = policy or corpus.tcfg.loss_mask
    total, count = 0.0, 0
    with ag.no_grad():
        for b0 in range(0, len(corpus), batch_size):
            ex = [corpus.encode(i, None, with_points=encoder is not None) for i in range(b0, min(b0 + batch_size, len(corpus)))]
            tokens = np.stack([e.tokens for e in ex])
            points = np.stack([e.points for e in ex]) if encoder is not None else None
            loss, n = batch_loss(model, tokens, policy, encoder, points)
            total += float(loss.data) * n
            count += n
    if count == 0:
        raise EmptyLossError("held-out corpus has no scored tokens")
    mean_nll = total / count
    return mean_nll, math.exp(mean_nll)
