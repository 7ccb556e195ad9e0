import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from causaltree.criteria import (
    adaptive_ct_value,
    fit_value,
    honest_ct_value,
    parse_estimator,
    tot_value,
    ts_split_stat,
)
from causaltree.data import CausalDataset, transformed_outcome
from causaltree.sim import generate
from causaltree.tree import (
    GrowError,
    GrowParams,
    Node,
    Tree,
    apply,
    bucket_splits,
    candidate_splits,
    grow_tree,
    leaf_stats,
)


def _ds(y, w, x=None):
    y = np.asarray(y, dtype=float)
    x = np.zeros((y.size, 1)) if x is None else np.asarray(x, dtype=float).reshape(y.size, -1)
    return CausalDataset(y, np.asarray(w), x, marginal_p=0.5)


def _stump(feature=0, threshold=1.0, k=2):
    nodes = {
        0: Node(0, 0, None, feature, threshold, 1, 2),
        1: Node(1, 1, 0),
        2: Node(2, 1, 0),
    }
    return Tree(nodes, n_features=k)


# leaf statistics -----------------------------------------------------------


def test_leaf_stats_one_arm():
    s = leaf_stats(_ds([1, 3, 0], [1, 1, 0]), [0, 1])
    assert (s.mean_treat, s.var_treat, s.n_control) == (2.0, 2.0, 0)
    assert s.mean_control is None and s.var_control is None


def test_leaf_stats_single_unit():
    s = leaf_stats(_ds([5, 1], [0, 1]), [0])
    assert s.mean_control == 5.0 and s.var_control is None


def test_leaf_stats_equal_means():
    s = leaf_stats(_ds([0, 0, 4, 4], [1, 0, 1, 0]), np.arange(4))
    assert s.mean_treat == 2.0 and s.mean_control == 2.0


def test_leaf_stats_mean_all_is_weighted_average():
    rng = np.random.default_rng(0)
    ds = _ds(rng.normal(size=11), rng.integers(0, 2, 11) | np.eye(1, 11, 0, dtype=int)[0])
    s = leaf_stats(ds, np.arange(11))
    if s.n_control:
        avg = (s.n_treat * s.mean_treat + s.n_control * s.mean_control) / s.n
        assert s.mean_all == pytest.approx(avg)
    assert s.var_treat is None or s.var_treat >= 0


# candidate splits ----------------------------------------------------------


def test_candidates_small_arm_gives_none():
    x = np.arange(1, 9, dtype=float)
    ds = _ds(np.zeros(16), [1] * 8 + [0] * 8, np.r_[x, x])
    assert candidate_splits(ds, np.arange(16), 0, GrowParams(n_min=5)).size == 0


def test_candidates_bucket_hand_trace():
    x = np.arange(1, 9, dtype=float)
    ds = _ds(np.zeros(16), [1] * 8 + [0] * 8, np.r_[x, x])
    thr = candidate_splits(ds, np.arange(16), 0, GrowParams(n_min=2, bucket_size=4))
    np.testing.assert_array_equal(thr, [4.0])


def test_candidates_constant_feature():
    ds = _ds(np.zeros(200), np.arange(200) % 2, np.ones(200))
    assert candidate_splits(ds, np.arange(200), 0, GrowParams()).size == 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(100, 400), b=st.integers(1, 6))
def test_bucket_steps_move_both_arms(seed, n, b):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    w = rng.random(n) < 0.5
    thr, nl1, nl0 = bucket_splits(np.sort(x[w]), np.sort(x[~w]), b, 10)
    assert np.all(np.diff(nl1) >= 1) and np.all(np.diff(nl0) >= 1)
    assert np.all(np.diff(thr) >= 0)


# routing -------------------------------------------------------------------


def test_apply_single_leaf():
    t = Tree({0: Node(0, 0)}, n_features=2)
    assert apply(t, [3.0, -1.0]) == 0


def test_apply_boundary_goes_left():
    t = _stump()
    assert apply(t, [1.0, 0.0]) == 1
    assert apply(t, [1.0000001, 0.0]) == 2
    np.testing.assert_array_equal(t.apply([[1.0, 9.0], [1.0000001, 9.0]]), [1, 2])


def test_apply_wrong_width():
    with pytest.raises(ValueError):
        _stump().apply(np.zeros((2, 3)))


# growth --------------------------------------------------------------------


def _design(design=1, n=500, seed=0):
    return generate(design, n, np.random.default_rng(seed))


def test_max_depth_zero():
    ds = _design()
    assert grow_tree(ds, None, parse_estimator("CT-H"), GrowParams(max_depth=0)).n_leaves == 1


def test_root_too_small():
    ds = _design(n=30)
    with pytest.raises(GrowError):
        grow_tree(ds, None, parse_estimator("CT-H"), GrowParams())


@pytest.mark.parametrize("name", ["CT-H", "CT-A", "F-H", "TS-H", "TOT-H"])
def test_leaf_minimums(name):
    ds = _design(2, 800, 1)
    params = GrowParams()
    tree = grow_tree(ds, None, parse_estimator(name), params)
    leaf_of = tree.apply(ds.covariates)
    for leaf in tree.leaves:
        w = ds.treatments[leaf_of == leaf]
        if name.startswith("TOT"):
            assert w.size >= 2 * params.n_min
        else:
            assert w.sum() >= params.n_min and (1 - w).sum() >= params.n_min


def test_grow_deterministic():
    ds = _design(1, 600, 2)
    a = grow_tree(ds, None, parse_estimator("CT-H"))
    b = grow_tree(ds, None, parse_estimator("CT-H"))
    assert a.to_dict() == b.to_dict()


def _brute_best(ds, idx, name, params):
    """Best root split by direct evaluation of the leaf-level criteria."""
    spec = parse_estimator(name, n_est=idx.size)
    y = transformed_outcome(ds, 0.5) if spec.family == "TOT" else None
    n = idx.size

    def value(parts):
        stats = [leaf_stats(ds, p, outcomes=y) for p in parts]
        if spec.family == "CT":
            return honest_ct_value(stats, n, n, 0.5) if spec.honest else adaptive_ct_value(stats, n)
        if spec.family == "F":
            return fit_value(stats, spec.honest, n, n)
        return tot_value(stats, n)

    best = (-math.inf, None, None)
    base = None if spec.family == "TS" else value([idx])
    w = ds.treatments[idx] == 1
    for f in range(ds.k):
        x = ds.covariates[idx, f]
        if spec.pooled:
            options = []
            for t in candidate_splits(ds, idx, f, params, spec):
                go = x <= t
                options.append((t, idx[go], idx[~go]))
        else:
            # bucket partitions: first k buckets of each arm go left
            ot, oc = idx[w][np.argsort(x[w], kind="stable")], idx[~w][np.argsort(x[~w], kind="stable")]
            thr, nl1, nl0 = bucket_splits(np.sort(x[w]), np.sort(x[~w]), params.bucket_size, params.n_min)
            options = [(t, np.r_[ot[:a], oc[:b]], np.r_[ot[a:], oc[b:]]) for t, a, b in zip(thr, nl1, nl0)]
        for t, lo, hi in options:
            if spec.family == "TS":
                gain = ts_split_stat(leaf_stats(ds, lo), leaf_stats(ds, hi))
            else:
                gain = value([lo, hi]) - base
            if gain > best[0] + 1e-12:
                best = (gain, f, t)
    return best


@pytest.mark.parametrize("name", ["CT-H", "CT-A", "F-H", "F-A", "TS-H", "TOT-H"])
def test_root_split_matches_brute_force(name):
    ds = _design(1, 300, 5)
    idx = np.arange(ds.n)
    params = GrowParams(n_min=25)
    gain, f, t = _brute_best(ds, idx, name, params)
    tree = grow_tree(ds, idx, parse_estimator(name, n_est=ds.n), GrowParams(n_min=25, max_depth=1))
    root = tree.nodes[0]
    if gain > 0:
        assert (root.feature, root.threshold) == (f, pytest.approx(t))
    else:
        assert root.is_leaf


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), shift=st.floats(-50, 50))
def test_ct_split_shift_invariant(seed, shift):
    ds = _design(1, 300, seed)
    moved = CausalDataset(ds.outcomes + shift, ds.treatments, ds.covariates, marginal_p=0.5)
    params = GrowParams(max_depth=1)
    for name in ("CT-H", "CT-A"):
        a = grow_tree(ds, None, parse_estimator(name), params).nodes[0]
        b = grow_tree(moved, None, parse_estimator(name), params).nodes[0]
        assert (a.feature, a.threshold) == (b.feature, b.threshold)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_partition_property(seed):
    ds = _design(2, 500, seed)
    tree = grow_tree(ds, None, parse_estimator("CT-A"), GrowParams(n_min=15))
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(10_000, ds.k)) * 2
    leaf_of = tree.apply(X)
    assert set(np.unique(leaf_of)) <= set(tree.leaves)
    for leaf in tree.leaves:
        inside = np.ones(X.shape[0], dtype=bool)
        for f, (lo, hi) in tree.region(leaf).items():
            inside &= (X[:, f] > lo) & (X[:, f] <= hi)
        np.testing.assert_array_equal(inside, leaf_of == leaf)
    for nid in tree.internal:
        nd = tree.nodes[nid]
        assert set(tree.subtree_leaves(nd.left)).isdisjoint(tree.subtree_leaves(nd.right))
        assert sorted(tree.subtree_leaves(nd.left) + tree.subtree_leaves(nd.right)) == tree.subtree_leaves(nid)


def test_json_roundtrip():
    ds = _design(1, 500, 3)
    tree = grow_tree(ds, None, parse_estimator("CT-H"))
    back = Tree.from_dict(json.loads(json.dumps(tree.to_dict())))
    np.testing.assert_array_equal(back.apply(ds.covariates), tree.apply(ds.covariates))
    assert back.to_dict() == tree.to_dict()
    assert "leaf" in tree.to_text()


def test_from_dict_rejects_bad_graph():
    d = _stump().to_dict()
    d["nodes"][2]["parent"] = 1
    with pytest.raises(ValueError):
        Tree.from_dict(d)


@pytest.mark.xfail(reason="grown trees on pure noise split in most samples: the best of many "
                          "candidate splits clears the variance penalty", strict=False)
def test_pure_noise_grows_single_leaf():
    singles = 0
    for s in range(200):
        rng = np.random.default_rng(s)
        ds = CausalDataset(rng.normal(size=500), rng.integers(0, 2, 500), rng.normal(size=(500, 2)))
        singles += grow_tree(ds, None, parse_estimator("CT-H", n_est=500)).n_leaves == 1
    assert singles >= 160
