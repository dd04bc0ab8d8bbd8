from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hgtree.errors import DegenerateGeometryError, InvalidParamsError, NotATreeError
from hgtree.procedural import ProceduralParams, generate_corpus, generate_procedural, profile
from hgtree.tree import (EPS_CONNECT, GrowthSequence, TreeSkeleton, augment, branch_areas, build_tree_graph,
                         graph_from_parents, normalize, sample_point_cloud)

from conftest import branch, make_tree


def test_tree_requires_eight_columns():
    with pytest.raises(ValueError):
        TreeSkeleton(np.zeros((2, 7)))


def test_validate_rejects_zero_length_and_nonpositive_radius():
    with pytest.raises(ValueError):
        make_tree([branch((0, 0, 0), (0, 0, 0))]).validate()
    with pytest.raises(ValueError):
        make_tree([branch((0, 0, 0), (0, 0, 1), rs=0.0)]).validate()
    make_tree([branch((0, 0, 0), (0, 0, 1))]).validate(n_max=1)


def test_growth_sequence_needs_ten_stages():
    t = make_tree([branch((0, 0, 0), (0, 0, 1))])
    with pytest.raises(ValueError):
        GrowthSequence((t,) * 9)
    assert GrowthSequence((t,) * 10).counts() == [1] * 10


# ---- tree graph ------------------------------------------------------------------


def test_trunk_with_two_children():
    t = make_tree([branch((0, 0, 0), (0, 0, 1)), branch((0, 0, 1), (1, 0, 2)), branch((0, 0, 1), (-1, 0, 1.5))])
    g = build_tree_graph(t)
    assert g.root == 0
    assert set(g.children[0]) == {1, 2}
    assert g.parent == (None, 0, 0)


def test_single_branch_graph():
    g = build_tree_graph(make_tree([branch((0, 0, 0), (0, 0, 1))]))
    assert g.root == 0 and g.children == ((),)


def test_perturbed_child_gives_two_orphans():
    t = make_tree([branch((0, 0, 0), (0, 0, 1)), branch((0, 0, 1 + 2 * EPS_CONNECT), (1, 0, 2))])
    with pytest.raises(NotATreeError) as err:
        build_tree_graph(t)
    assert sorted(err.value.branches) == [0, 1]


def test_cycle_is_rejected():
    # two branches whose ends feed each other's starts: no parentless branch
    t = make_tree([branch((0, 0, 0), (0, 0, 1)), branch((0, 0, 1), (0, 0, 0))])
    with pytest.raises(NotATreeError):
        build_tree_graph(t)


def test_canonical_child_order_is_descending_t(y_tree):
    g = build_tree_graph(y_tree)
    # child 1 ends at z=0.5, child 2 at z=0.4 -> 1 first
    assert g.children[0] == (1, 2)
    assert g.depths() == [0, 1, 1, 2]


def test_canonical_child_order_ties_by_index():
    t = make_tree([branch((0, 0, 0), (0, 0, 1)), branch((0, 0, 1), (1, 0, 2)), branch((0, 0, 1), (1, 0, 2))])
    assert build_tree_graph(t).children[0] == (1, 2)


def test_native_parents_agree_with_geometry(elm_trees):
    for t in elm_trees[:10]:
        g1, g2 = build_tree_graph(t), graph_from_parents(t)
        assert g1.parent == g2.parent and g1.children == g2.children


# ---- procedural --------------------------------------------------------------------


def test_minimal_recursion_is_single_trunk():
    p = ProceduralParams(depth_range=(1, 1), children_probs=(1.0,), seed=3)
    gs = generate_procedural(p, 10)
    assert gs.counts() == [1] * 10


def test_procedural_determinism():
    a = generate_procedural(*profile("elm", 42))
    b = generate_procedural(*profile("elm", 42))
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.stages, b.stages))


@pytest.mark.parametrize("bad", [dict(depth_range=(0, 0)), dict(length_decay=1.0), dict(radius_decay=0.0),
                                 dict(children_probs=(0.0, 0.0)), dict(angle_range=(10, 200))])
def test_invalid_params(bad):
    with pytest.raises(InvalidParamsError):
        generate_procedural(ProceduralParams(**bad), 10)


def test_procedural_stages_are_valid_nested_trees():
    for seed in range(60):
        params, n_max = profile("elm", seed)
        gs = generate_procedural(params, n_max)
        assert gs.final.n <= n_max
        for a, b in zip(gs.stages, gs.stages[1:]):
            assert a.n <= b.n
            for row in a.data:
                hit = np.flatnonzero(np.all(b.data[:, [0, 1, 2, 4, 5, 6]] == row[[0, 1, 2, 4, 5, 6]], axis=1))
                assert hit.size == 1
                assert b.data[hit[0], 3] >= row[3] and b.data[hit[0], 7] >= row[7]
        for s in gs.stages:
            s.validate()
            build_tree_graph(s)


def test_procedural_corpus_sweep_builds_graphs():
    # the full 1000-seed sweep runs in the acceptance module; this is the quick version
    for t in generate_corpus("elm", range(1000, 1200)):
        g = build_tree_graph(t)
        assert g.root == 0
        # children never thicker than their parent
        for b, p in enumerate(g.parent):
            if p is not None:
                assert t.data[b, 3] <= t.data[p, 3] + 1e-12


# ---- normalization / augmentation ---------------------------------------------------------


def test_normalize_bounds_and_round_trip(elm_trees):
    raw = generate_corpus("elm", [7])[0]
    t, xf = normalize(raw)
    pts = t.points()
    assert pts.min() >= -1 - 1e-12 and pts.max() <= 1 + 1e-12
    assert np.isclose(np.abs(pts).max(), 1.0)
    assert np.abs(xf.invert(t).data - raw.data).max() <= 1e-9
    assert np.isclose(xf.r_max, t.radii.max())


def test_normalize_identity_on_touching_cube():
    t = make_tree([branch((-1, -1, -1), (1, 1, 1), 0.1, 0.05)])
    out, xf = normalize(t)
    assert np.allclose(out.data, t.data) and xf.scale == 1.0


def test_normalize_scale_invariance():
    raw = generate_corpus("sapling", [3])[0]
    d = raw.data.copy() * 10
    a, _ = normalize(raw)
    b, _ = normalize(raw.with_data(d))
    assert np.allclose(a.data, b.data, atol=1e-12)


def test_normalize_degenerate():
    with pytest.raises(DegenerateGeometryError):
        normalize(make_tree([branch((1, 1, 1), (1, 1, 1))]))


def test_augment_identities(elm_trees):
    t = elm_trees[0]
    assert augment(t, 0.0, False).equals(t)
    assert augment(augment(t, math.pi, False), math.pi, False).equals(t, atol=1e-9)
    assert augment(augment(t, 0.0, True), 0.0, True).equals(t)


@given(theta=st.floats(0, 2 * math.pi), mirror=st.booleans(), idx=st.integers(0, 9))
def test_augment_is_isometry_and_keeps_topology(elm_trees, theta, mirror, idx):
    t = elm_trees[idx]
    a = augment(t, theta, mirror, renormalize=False)
    p, q = t.points(), a.points()
    dp = np.linalg.norm(p[:, None] - p[None], axis=-1)
    dq = np.linalg.norm(q[:, None] - q[None], axis=-1)
    assert np.abs(dp - dq).max() <= 1e-9
    assert np.array_equal(a.radii, t.radii)
    assert build_tree_graph(a).parent == build_tree_graph(t).parent


def test_augment_renormalizes_only_when_leaving_cube(elm_trees):
    t = elm_trees[1]
    a = augment(t, math.pi / 4, False)
    assert np.abs(a.points()).max() <= 1.0 + 1e-12


# ---- point clouds ----------------------------------------------------------------------


def _dist_to_segment(p, a, b):
    ab = b - a
    s = np.clip(((p - a) @ ab) / (ab @ ab), 0, 1)
    return np.linalg.norm(p - (a + s[:, None] * ab), axis=1)


def test_point_cloud_on_unit_branch():
    t = make_tree([branch((0, 0, 0), (0, 0, 1), 0.1, 0.1)])
    pts = sample_point_cloud(t, 1000, seed=0)
    d = _dist_to_segment(pts, np.zeros(3), np.array([0, 0, 1.0]))
    assert pts.shape == (1000, 3)
    assert np.all(np.abs(d - 0.1) <= 1e-9)


def test_point_cloud_tapered_branch_radius():
    t = make_tree([branch((0, 0, 0), (0, 0, 1), 0.2, 0.1)])
    pts = sample_point_cloud(t, 500, seed=1)
    expected = 0.2 - 0.1 * pts[:, 2]
    assert np.allclose(np.linalg.norm(pts[:, :2], axis=1), expected, atol=1e-9)


def test_point_cloud_area_split_binomial():
    # equal lengths, radius ratio 3:1 -> lateral area ratio 3:1
    t = make_tree([branch((0, 0, 0), (0, 0, 1), 0.3, 0.3), branch((5, 0, 0), (5, 0, 1), 0.1, 0.1)])
    areas = branch_areas(t)
    assert np.isclose(areas[0] / areas[1], 3.0)
    n = 10000
    _, which = sample_point_cloud(t, n, seed=2, return_branch=True)
    k = int(np.sum(which == 0))
    mu, sd = n * 0.75, math.sqrt(n * 0.75 * 0.25)
    assert abs(k - mu) <= 3 * sd


def test_point_cloud_count_and_determinism(elm_trees):
    a = sample_point_cloud(elm_trees[2], 200, seed=5)
    b = sample_point_cloud(elm_trees[2], 200, seed=5)
    assert a.shape == (200, 3) and np.array_equal(a, b)
