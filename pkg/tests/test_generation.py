from __future__ import annotations

import numpy as np
import pytest

from hgtree.conditioning import PointCloudEncoder
from hgtree.errors import CapacityError, InvalidParamsError, MalformedGrowthError, ShapeError
from hgtree.generation import (SamplerConfig, complete, complete_sequences, encode_point_cloud, prompt_tokens,
                               sample_conditional, sample_growth, sample_unconditional)
from hgtree.model import HourglassModel, ModelConfig
from hgtree.tokenizer import EOS, N_BINS, PAD, SOS, Quantizer, detokenize, uniform_coord_edges
from hgtree.tree import sample_point_cloud

from conftest import branch, make_tree

CONTEXT = 128


def model(prefix=0, variant="HG2RL", seed=0, context=CONTEXT):
    return HourglassModel(ModelConfig(variant=variant, dim=16, heads=2, total_layers=6, context=context,
                                      prefix=prefix, dtype="float64", seed=seed))


def eos_loving(m):
    """Zero the head weights and bias it hard towards EOS."""
    m.params["head.w"].data[:] = 0.0
    m.params["head.b"].data[:] = 0.0
    m.params["head.b"].data[EOS] = 50.0
    return m


def q_uniform():
    return Quantizer(uniform_coord_edges(), np.linspace(0.001, 0.1, 257))


def check_grammar(tokens):
    tok = list(tokens)
    assert tok[:8] == [SOS] * 8
    body = tok[8:]
    if EOS in body:
        e = body.index(EOS)
        assert e % 8 == 0 and e > 0
        assert body[e:e + 8] == [EOS] * 8
        assert all(t == PAD for t in body[e + 8:])
        body = body[:e]
    assert all(t < N_BINS or t == PAD for t in body)


def test_sampler_config_validation():
    for bad in (dict(temperature=0.0), dict(temperature=-1.0), dict(top_k=0), dict(max_new_tokens=-1)):
        with pytest.raises(InvalidParamsError):
            SamplerConfig(**bad)


def test_sampling_is_seeded():
    m = model()
    a = sample_unconditional(m, SamplerConfig(seed=5, max_new_tokens=40))
    b = sample_unconditional(m, SamplerConfig(seed=5, max_new_tokens=40))
    c = sample_unconditional(m, SamplerConfig(seed=6, max_new_tokens=40))
    assert np.array_equal(a.tokens, b.tokens)
    assert not np.array_equal(a.tokens, c.tokens)


@pytest.mark.parametrize("variant", ["PT", "HG2RL"])
def test_cached_and_uncached_decoding_agree(variant):
    m = model(variant=variant)
    cfg = SamplerConfig(seed=2, max_new_tokens=48)
    assert np.array_equal(sample_unconditional(m, cfg).tokens, sample_unconditional(m, cfg, use_cache=False).tokens)


def test_output_follows_grammar_and_length():
    m = model()
    for seed in range(5):
        out = sample_unconditional(m, SamplerConfig(seed=seed, temperature=1.5))
        assert len(out.tokens) == CONTEXT
        check_grammar(out.tokens)


def test_budget_exhaustion_sets_truncated():
    m = model()
    m.params["head.b"].data[EOS] = -50.0
    out = sample_unconditional(m, SamplerConfig(max_new_tokens=20))
    assert out.truncated and out.n_generated == 20
    assert out.tree(q_uniform()).n == 2  # 20 tokens = 2 full groups + a dropped partial one


def test_eos_closes_after_first_branch():
    m = eos_loving(model())
    out = sample_unconditional(m, SamplerConfig(greedy=True))
    tok = out.tokens
    assert not out.truncated
    assert np.all(tok[8:16] < N_BINS) and np.all(tok[16:24] == EOS) and np.all(tok[24:] == PAD)


def test_completion_preserves_prompt_and_stops_on_eos(y_tree):
    q = q_uniform()
    m = eos_loving(model())
    prompt = prompt_tokens(y_tree, q, "dfs")
    outs = complete_sequences(m, y_tree, q, SamplerConfig(greedy=True), n_samples=2)
    for out in outs:
        assert list(out.tokens[: len(prompt)]) == prompt
        assert np.all(out.tokens[len(prompt):len(prompt) + 8] == EOS)
    tree = complete(m, y_tree, q, SamplerConfig(greedy=True))[0]
    assert tree.n == y_tree.n
    assert np.allclose(tree.data, detokenize(prompt + [EOS] * 8, q).data)


def test_completion_of_closed_prompt_is_unchanged(y_tree):
    q = q_uniform()
    m = model()
    out = complete_sequences(m, y_tree, q, SamplerConfig(seed=1), close=True)[0]
    prompt = prompt_tokens(y_tree, q, close=True)
    assert list(out.tokens[: len(prompt)]) == prompt and np.all(out.tokens[len(prompt):] == PAD)


def test_completion_sample_seeds_differ(y_tree):
    q = q_uniform()
    outs = complete_sequences(model(), y_tree, q, SamplerConfig(seed=0, max_new_tokens=16), n_samples=3)
    assert len({o.tokens.tobytes() for o in outs}) == 3


def test_prompt_over_capacity():
    q = q_uniform()
    rows = [branch((0, 0, i / 40), (0, 0, (i + 1) / 40)) for i in range(20)]
    with pytest.raises(CapacityError):
        complete(model(), make_tree(rows), q)


# ---- point cloud conditioning --------------------------------------------------------------------


def encoder(n_points=64, seed=0):
    return PointCloudEncoder(16, 2, n_points=n_points, slots=56, dtype="float64", seed=seed)


def test_encoder_is_permutation_invariant(elm_trees):
    enc = encoder()
    pts = sample_point_cloud(elm_trees[0], 64, seed=1)
    perm = np.random.default_rng(0).permutation(64)
    a, b = encode_point_cloud(enc, pts), encode_point_cloud(enc, pts[perm])
    assert a.shape == (1, 56, 16)
    assert np.abs(a - b).max() <= 1e-5


def test_encoder_separates_different_clouds(elm_trees):
    enc = encoder()
    a = encode_point_cloud(enc, sample_point_cloud(elm_trees[0], 64, seed=1))
    b = encode_point_cloud(enc, sample_point_cloud(elm_trees[5], 64, seed=1))
    assert np.abs(a - b).max() > 1e-3


def test_encoder_shape_errors():
    enc = encoder()
    with pytest.raises(ShapeError):
        enc.encode(np.zeros((63, 3)))
    with pytest.raises(ShapeError):
        enc.encode(np.zeros((64, 2)))
    with pytest.raises(ShapeError):
        PointCloudEncoder(16, 2, n_points=0)


def test_conditional_sampling(elm_trees):
    m = model(prefix=56)
    prefix = encode_point_cloud(encoder(), sample_point_cloud(elm_trees[0], 64, seed=1))
    cfg = SamplerConfig(seed=3, max_new_tokens=40)
    a = sample_conditional(m, prefix, cfg)
    assert np.array_equal(a.tokens, sample_conditional(m, prefix, cfg, use_cache=False).tokens)
    check_grammar(a.tokens)
    zero = sample_conditional(m, np.zeros((56, 16)), cfg)
    check_grammar(zero.tokens)
    assert zero.tree(q_uniform()).n >= 1


def test_conditional_prefix_mismatch():
    m = model(prefix=56)
    with pytest.raises(ShapeError):
        sample_conditional(m, np.zeros((48, 16)))
    with pytest.raises(ShapeError):
        sample_unconditional(m)


# ---- growth ----------------------------------------------------------------------------------


def test_growth_frames_and_malformed_error():
    q = q_uniform()
    m = eos_loving(model(context=8 * 3 * 10 + 16))
    gs, out = sample_growth(m, q, SamplerConfig(greedy=True))
    assert gs.counts() == [1] * 10 and out.stages == 10
    short = eos_loving(model(context=8 * 3 * 4))
    with pytest.raises(MalformedGrowthError) as err:
        sample_growth(short, q, SamplerConfig(greedy=True))
    assert err.value.recovered == 4
