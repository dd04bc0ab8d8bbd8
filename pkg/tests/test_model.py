from __future__ import annotations

import math

import numpy as np
import pytest

from hgtree import autograd as ag
from hgtree.autograd import Tensor
from hgtree.errors import ShapeError
from hgtree.model import HourglassModel, ModelConfig, linked_pairs


def small(variant="HG2", **kw):
    base = dict(variant=variant, dim=32, heads=4, total_layers=6, context=64, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def leak_positions(model, L=64, seed=0):
    """Positions j whose change alters logits at some i < j."""
    rng = np.random.default_rng(seed)
    toks = rng.integers(0, 259, (1, L))
    base = model.logits_numpy(toks)
    bad = []
    for j in range(L):
        t2 = toks.copy()
        t2[0, j] = (t2[0, j] + 1) % 259
        if not np.array_equal(model.logits_numpy(t2)[0, :j], base[0, :j]):
            bad.append(j)
    return bad


# ---- oracle: plain decoder written from scratch ------------------------------------------------


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def reference_plain_decoder(p, tokens, heads):
    """Loop-per-head numpy transformer with the same parameter names as the PT variant."""
    x = p["tok_emb"][tokens] + p["pos0"][: tokens.shape[-1]]
    T, D = x.shape
    dh = D // heads
    names = sorted({k.split(".")[0] for k in p if k.startswith("mid")}, key=lambda s: int(s[3:]))
    for n in names:
        h = _ln(x, p[f"{n}.ln1.g"], p[f"{n}.ln1.b"])
        qkv = h @ p[f"{n}.qkv.w"] + p[f"{n}.qkv.b"]
        q, k, v = qkv[:, :D], qkv[:, D:2 * D], qkv[:, 2 * D:]
        out = np.zeros_like(x)
        for hh in range(heads):
            sl = slice(hh * dh, (hh + 1) * dh)
            for i in range(T):
                s = q[i, sl] @ k[: i + 1, sl].T / math.sqrt(dh)
                w = np.exp(s - s.max())
                w /= w.sum()
                out[i, sl] = w @ v[: i + 1, sl]
        x = x + out @ p[f"{n}.proj.w"] + p[f"{n}.proj.b"]
        h = _ln(x, p[f"{n}.ln2.g"], p[f"{n}.ln2.b"])
        x = x + _gelu(h @ p[f"{n}.fc1.w"] + p[f"{n}.fc1.b"]) @ p[f"{n}.fc2.w"] + p[f"{n}.fc2.b"]
    return _ln(x, p["ln_f.g"], p["ln_f.b"]) @ p["head.w"] + p["head.b"]


def test_plain_variant_matches_reference_decoder():
    cfg = ModelConfig(variant="PT", dim=16, heads=2, total_layers=2, context=24, dtype="float64", seed=3)
    m = HourglassModel(cfg)
    rng = np.random.default_rng(1)
    for k, p in m.params.items():  # move biases / norms off their trivial init
        if not k.endswith(".w") and k != "tok_emb" and not k.startswith("pos"):
            p.data += rng.normal(0, 0.1, p.shape)
    toks = rng.integers(0, 259, 24)
    ref = reference_plain_decoder(m.arrays(), toks, cfg.heads)
    assert np.allclose(m.logits_numpy(toks[None])[0], ref, atol=1e-10)


# ---- shapes ---------------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["PT", "HG1", "HG2", "HG2R", "HG2RL"])
def test_output_shape(variant):
    m = HourglassModel(small(variant, dtype="float32"))
    out = m.logits_numpy(np.zeros((2, 64), dtype=int))
    assert out.shape == (2, 64, 259) and out.dtype == np.float32


def test_wrong_length_raises():
    m = HourglassModel(small())
    with pytest.raises(ShapeError):
        m.logits_numpy(np.zeros((1, 60), dtype=int))
    with pytest.raises(ShapeError):
        m.logits_numpy(np.zeros((1, 12), dtype=int), crop=True)  # not aligned to 8
    assert m.logits_numpy(np.zeros((1, 16), dtype=int), crop=True).shape == (1, 16, 259)


def test_prefix_shape_checked():
    m = HourglassModel(small(prefix=8))
    with pytest.raises(ShapeError):
        m.forward(np.zeros((1, 64), dtype=int), Tensor(np.zeros((1, 4, 32))))
    with pytest.raises(ShapeError):
        HourglassModel(small()).forward(np.zeros((1, 64), dtype=int), Tensor(np.zeros((1, 8, 32))))


def test_stage_ladder_and_cost():
    cfg = ModelConfig(variant="HG2", context=1616, dim=8, heads=2)
    assert cfg.stage_lengths() == [1616, 404, 202, 404, 1616]
    pt = ModelConfig(variant="PT", context=1616, dim=8, heads=2)
    assert pt.attention_cost() == 24 * 1616 ** 2
    assert cfg.attention_cost() == 2 * 1616 ** 2 + 2 * 404 ** 2 + 20 * 202 ** 2
    assert round(cfg.attention_cost() / pt.attention_cost(), 4) == 0.1016


def test_config_rejects_acausal_and_bad_layers():
    with pytest.raises(ValueError):
        small(skip_shift=0)
    with pytest.raises(ValueError):
        small(total_layers=4)
    with pytest.raises(ShapeError):
        small(context=60)


def test_linked_pairs_mirror_first_half():
    assert linked_pairs(ModelConfig(variant="HG2RL", total_layers=24, dim=8, heads=2)) == [
        (10, 9), (11, 8), (12, 7), (13, 6), (14, 5), (15, 4), (16, 3), (17, 2), (18, 1), (19, 0)]


# ---- causality -------------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["PT", "HG1", "HG2", "HG2R", "HG2RL"])
def test_causal(variant):
    m = HourglassModel(small(variant))
    for p in m.params.values():
        if p.name and p.name.startswith("alpha"):
            p.data[:] = 1.0
    assert leak_positions(m) == []


@pytest.mark.parametrize("kw", [dict(down_shift=(0, 0)), dict(skip_shift=0)])
def test_negative_controls_leak(kw):
    m = HourglassModel(small(allow_acausal=True, **kw))
    assert leak_positions(m) != []


def test_causal_with_zero_boundary_and_full_delay():
    assert leak_positions(HourglassModel(small(boundary="zero"))) == []
    assert leak_positions(HourglassModel(small(down_shift=(3, 1), skip_shift=0))) == []


# ---- variant relations ------------------------------------------------------------------------


def test_linked_with_zero_alpha_equals_unlinked():
    a = HourglassModel(small("HG2RL", total_layers=8))
    b = HourglassModel(small("HG2", total_layers=8), {k: v for k, v in a.arrays().items() if not k.startswith("alpha")})
    toks = np.random.default_rng(0).integers(0, 259, (1, 64))
    assert np.array_equal(a.logits_numpy(toks), b.logits_numpy(toks))


def test_unit_alpha_equals_plain_residual_links():
    a = HourglassModel(small("HG2RL", total_layers=8))
    for k, p in a.params.items():
        if k.startswith("alpha"):
            p.data[:] = 1.0
    b = HourglassModel(small("HG2R", total_layers=8), {k: v for k, v in a.arrays().items() if not k.startswith("alpha")})
    toks = np.random.default_rng(0).integers(0, 259, (1, 64))
    assert np.allclose(a.logits_numpy(toks), b.logits_numpy(toks), atol=1e-12)


def test_gradient_reaches_alpha():
    m = HourglassModel(small("HG2RL", total_layers=8))
    toks = np.random.default_rng(0).integers(0, 259, (1, 64))
    ag.cross_entropy(m.forward(toks)[:, :-1], toks[:, 1:]).backward()
    alphas = [p.grad for k, p in m.params.items() if k.startswith("alpha")]
    assert alphas and all(g is not None and np.abs(g).max() > 0 for g in alphas)


def _plain_count(d, v, L, layers):
    return v * d + L * d + layers * (12 * d * d + 13 * d) + 2 * d + d * v + v


def test_parameter_count_formula():
    m = HourglassModel(ModelConfig(variant="PT", dim=16, heads=2, total_layers=3, context=16))
    assert m.num_parameters() == _plain_count(16, 259, 16, 3)
    # at width 512, 24 layers, 1616 positions
    assert _plain_count(512, 259, 1616, 24) == 76_751_107


# ---- incremental decoding -------------------------------------------------------------------------


@pytest.mark.parametrize("variant,prefix", [("PT", 0), ("HG1", 0), ("HG2", 0), ("HG2RL", 0), ("HG2RL", 16)])
def test_incremental_matches_full_forward(variant, prefix):
    m = HourglassModel(small(variant, prefix=prefix))
    rng = np.random.default_rng(1)
    for k, p in m.params.items():
        if k.startswith("alpha"):
            p.data[:] = rng.normal(size=p.shape)
    toks = rng.integers(0, 259, (2, 64))
    pre = rng.normal(size=(2, prefix, 32)) if prefix else None
    full = m.logits_numpy(toks, Tensor(pre) if prefix else None)
    dec = m.incremental(2)
    if prefix:
        dec.feed_prefix(pre)
    for i in range(64):
        lg = dec.step(toks[:, i])
        assert np.allclose(lg, full[:, i], atol=1e-10, rtol=1e-10)


def test_incremental_past_context_raises():
    m = HourglassModel(small("PT", context=8))
    dec = m.incremental(1)
    for _ in range(8):
        dec.step(np.array([1]))
    with pytest.raises(ShapeError):
        dec.step(np.array([1]))
