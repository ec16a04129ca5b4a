import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaepi.taskgen import (ClassPool, EpisodeSpec, MetaExample, PoolError, RngStream, TrialPool,
                             _cross_domain_split, _same_domain_split, make_gaussian_pool,
                             make_heterogeneous_pool, make_two_domain_pool, read_pool, sample_episode,
                             sample_task, select_classes, split_pool, subsample_pool, write_pool)


def gauss(seed=0, C=8, d=3, n=12, cs=2.0, ws=1.0, **kw):
    return make_gaussian_pool(C, d, n, cs, ws, RngStream(seed), **kw)


# -- rng -------------------------------------------------------------------------


def test_rng_same_path_same_draws():
    a = RngStream(5).child("x", 3).generator().standard_normal(4)
    b = RngStream(5).child("x", 3).generator().standard_normal(4)
    assert np.array_equal(a, b)


def test_rng_children_differ():
    root = RngStream(5)
    draws = {tuple(root.child(*p).generator().integers(0, 2**62, size=2))
             for p in [("a",), ("b",), (0,), (1,), ("a", 0)]}
    assert len(draws) == 5
    assert not np.array_equal(RngStream(5).generator().random(3), RngStream(6).generator().random(3))


def test_rng_rejects_bad_seed():
    with pytest.raises(ValueError):
        RngStream(-1)
    with pytest.raises(ValueError):
        RngStream(0).child(-3)


# -- generators -------------------------------------------------------------------


def test_gaussian_size_contract():
    pool = make_gaussian_pool(5, 2, 10, 1.0, 0.5, RngStream(7))
    assert (len(pool), pool.num_classes, pool.feature_dim, pool.num_domains) == (50, 5, 2, 1)
    assert np.array_equal(pool.counts(), np.full((5, 1), 10))


def test_gaussian_zero_within_spread_collapses_classes():
    pool = gauss(ws=0.0)
    for c in range(pool.num_classes):
        x = pool.features[pool.indices(c)]
        assert np.array_equal(x, np.broadcast_to(x[0], x.shape))


def test_gaussian_well_separated_ncm_oracle():
    # 10 instances per class fit the means, 10k held-out draws are classified
    pool = make_gaussian_pool(5, 8, 2010, 20.0, 1.0, RngStream(11))
    fit = np.concatenate([pool.indices(c)[:10] for c in range(5)])
    held = np.setdiff1d(np.arange(len(pool)), fit)
    means = np.stack([pool.features[pool.indices(c)[:10]].mean(0) for c in range(5)])
    d = ((pool.features[held][:, None, :] - means[None]) ** 2).sum(-1)
    acc = np.mean(d.argmin(1) == pool.class_ids[held])
    assert len(held) == 10_000
    assert acc > 0.99


def test_gaussian_signal_dims_and_modes():
    pool = gauss(C=6, d=5, n=40, signal_dims=2, noise_spread=0.0, ws=0.0, modes_per_class=2, mode_spread=1.0)
    assert np.all(pool.features[:, 2:] == 0.0)
    for c in range(6):
        x = pool.features[pool.indices(c)]
        assert len(np.unique(x, axis=0)) == 2
    # one mode is the plain generator, bit for bit
    assert gauss(modes_per_class=1, mode_spread=3.0).to_text() == gauss().to_text()


@pytest.mark.parametrize("bad", [dict(d=0), dict(C=0), dict(n=0), dict(cs=0.0), dict(ws=-1.0),
                                 dict(modes_per_class=0)])
def test_gaussian_errors(bad):
    with pytest.raises(PoolError):
        gauss(**bad)


def test_generators_are_deterministic():
    assert gauss(seed=3).to_text() == gauss(seed=3).to_text()
    assert gauss(seed=3).to_text() != gauss(seed=4).to_text()
    h = [make_heterogeneous_pool(3, 4, 3, 5, 1.0, 0.5, RngStream(2)).to_text() for _ in range(2)]
    assert h[0] == h[1]


def test_heterogeneous_size_and_tags():
    pool = make_heterogeneous_pool(5, 20, 4, 6, 1.0, 0.5, RngStream(0))
    assert pool.num_classes == 100
    subs = pool.class_subs
    assert subs.shape == (100,)
    assert np.array_equal(np.bincount(subs), np.full(5, 20))


def test_heterogeneous_single_sub_equals_gaussian():
    rng = RngStream(9)
    a = make_heterogeneous_pool(1, 6, 3, 7, 1.5, 0.4, rng, signal_dims=2, noise_spread=0.9)
    b = make_gaussian_pool(6, 3, 7, 1.5, 0.4, rng, signal_dims=2, noise_spread=0.9)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.class_ids, b.class_ids)


def _silhouette(x, labels):
    d = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
    s = []
    for i in range(len(x)):
        same = (labels == labels[i])
        same[i] = False
        a = d[i, same].mean()
        b = min(d[i, labels == l].mean() for l in np.unique(labels) if l != labels[i])
        s.append((b - a) / max(a, b))
    return float(np.mean(s))


def test_heterogeneous_task_embeddings_cluster_by_sub():
    pool = make_heterogeneous_pool(5, 10, 6, 10, 1.0, 0.5, RngStream(1), sub_offset=8.0)
    spec = EpisodeSpec(5, 1, 2)
    emb, subs = [], []
    for i in range(200):
        ep = sample_task(pool, spec, RngStream(1).child("task", i), by_sub=True)
        emb.append(ep.support_x.mean(0))
        subs.append(pool.class_subs[ep.class_ids[0]])
    assert _silhouette(np.array(emb), np.array(subs)) > 0.5


def test_heterogeneous_errors():
    with pytest.raises(PoolError):
        make_heterogeneous_pool(0, 3, 2, 2, 1.0, 1.0, RngStream(0))
    with pytest.raises(PoolError):
        make_heterogeneous_pool(2, 3, 0, 2, 1.0, 1.0, RngStream(0))


def test_two_domain_identity_transform():
    base = gauss()
    pool = make_two_domain_pool(base, np.eye(3), np.zeros(3), 0.0, RngStream(1))
    d0 = pool.features[pool.domain_ids == 0]
    d1 = pool.features[pool.domain_ids == 1]
    assert np.array_equal(d0, base.features)
    assert np.array_equal(d1, d0)


def test_two_domain_counts_match():
    g = np.random.default_rng(0)
    pool = make_two_domain_pool(gauss(), g.standard_normal((3, 3)) + 3 * np.eye(3), g.standard_normal(3), 0.5,
                                RngStream(1))
    c = pool.counts()
    assert c.shape == (8, 2)
    assert np.array_equal(c[:, 0], c[:, 1])


def test_two_domain_one_nn_oracle():
    base = make_gaussian_pool(20, 4, 30, 2.0, 0.5, RngStream(4))
    pool = make_two_domain_pool(base, 0.5 * np.eye(4), np.full(4, 6.0), 0.1, RngStream(5))

    def one_nn_acc(spec):
        accs = []
        for t in range(500):
            ep = sample_episode(pool, spec, RngStream(6).child(t))
            d = ((ep.val_x[:, None] - ep.support_x[None]) ** 2).sum(-1)
            accs.append(np.mean(ep.support_y[d.argmin(1)] == ep.val_y))
        return np.mean(accs)

    same = one_nn_acc(EpisodeSpec(5, 1, 5, 0, 0))
    cross = one_nn_acc(EpisodeSpec(5, 1, 5, 0, 1))
    assert same > cross


def test_two_domain_errors():
    base = gauss()
    with pytest.raises(PoolError, match="singular"):
        make_two_domain_pool(base, np.zeros((3, 3)), np.zeros(3), 0.0, RngStream(0))
    with pytest.raises(PoolError, match="transform"):
        make_two_domain_pool(base, np.eye(2), np.zeros(3), 0.0, RngStream(0))
    twice = make_two_domain_pool(base, np.eye(3), np.zeros(3), 0.0, RngStream(0))
    with pytest.raises(PoolError, match="single-domain"):
        make_two_domain_pool(twice, np.eye(3), np.zeros(3), 0.0, RngStream(0))


# -- pools ---------------------------------------------------------------------------


def test_pool_validation():
    with pytest.raises(PoolError, match="dense"):
        ClassPool(np.zeros((2, 2)), [0, 2], [0, 0])
    with pytest.raises(PoolError, match="finite"):
        ClassPool(np.array([[np.nan]]), [0], [0])
    with pytest.raises(PoolError):
        ClassPool(np.zeros((2, 2)), [0], [0, 0])
    pool = gauss()
    with pytest.raises(ValueError):
        pool.features[0, 0] = 1.0
    inst = pool.instance(3)
    assert inst.class_id == pool.class_ids[3] and np.array_equal(inst.features, pool.features[3])


def test_pool_text_round_trip(tmp_path):
    pool = make_heterogeneous_pool(2, 3, 3, 4, 1.0, 0.5, RngStream(3))
    path = tmp_path / "pool.txt"
    write_pool(pool, path)
    back = read_pool(path)
    assert back.to_text() == pool.to_text()
    assert np.array_equal(back.features, pool.features)
    assert path.read_text().splitlines()[0] == "metaepi-pool v1 dim=3 classes=6 domains=1"


def test_pool_reader_rejects_bad_files():
    text = gauss().to_text()
    with pytest.raises(PoolError, match="version"):
        ClassPool.from_text(text.replace("metaepi-pool v1", "metaepi-pool v2", 1))
    with pytest.raises(PoolError, match="not a pool"):
        ClassPool.from_text("hello\n")
    with pytest.raises(PoolError, match="fields"):
        ClassPool.from_text("metaepi-pool v1 dim=2 classes=1 domains=1\n0,0,1.0\n")
    with pytest.raises(PoolError, match="disagree"):
        ClassPool.from_text("metaepi-pool v1 dim=1 classes=2 domains=1\n0,0,1.0\n")


def test_subsample_keep_all_is_identity():
    pool = gauss()
    same = subsample_pool(pool, None, None, RngStream(1))
    assert np.array_equal(same.features, pool.features)
    assert np.array_equal(same.class_ids, pool.class_ids)
    assert same.metadata["class_origin"] == list(range(8))
    full = subsample_pool(pool, 8, 12, RngStream(1))
    assert np.array_equal(full.features, pool.features)


def test_subsample_bags_of_48():
    pool = gauss(C=64, n=3)
    bags = [subsample_pool(pool, 48, None, RngStream(0).child("bag", b)) for b in range(10)]
    assert all(b.num_classes == 48 for b in bags)
    origins = {tuple(b.metadata["class_origin"]) for b in bags}
    assert len(origins) == 10


def test_subsample_singletons():
    pool = subsample_pool(gauss(), None, 1, RngStream(2))
    assert np.array_equal(pool.counts(), np.ones((8, 1)))


def test_subsample_errors():
    with pytest.raises(PoolError):
        subsample_pool(gauss(), 9, None, RngStream(0))
    with pytest.raises(PoolError):
        subsample_pool(gauss(), None, 13, RngStream(0))
    with pytest.raises(PoolError):
        subsample_pool(gauss(), 0, None, RngStream(0))


def test_subsample_composition():
    pool = gauss(C=12, n=10)
    twice = subsample_pool(subsample_pool(pool, 9, 7, RngStream(1).child("a")), 5, 4, RngStream(1).child("b"))
    again = subsample_pool(subsample_pool(pool, 9, 7, RngStream(1).child("a")), 5, 4, RngStream(1).child("b"))
    assert twice.to_text() == again.to_text()
    assert twice.num_classes == 5 and np.array_equal(twice.counts(), np.full((5, 1), 4))
    # origins refer to the root pool, and every kept row is a row of it
    for c, origin in enumerate(twice.metadata["class_origin"]):
        rows = {tuple(r) for r in pool.features[pool.indices(origin)]}
        assert all(tuple(r) in rows for r in twice.features[twice.indices(c)])
    # each root class is equally likely to survive, composed or direct
    hits_two = np.zeros(12)
    hits_one = np.zeros(12)
    for s in range(400):
        a = subsample_pool(subsample_pool(pool, 9, None, RngStream(s).child("a")), 5, None, RngStream(s).child("b"))
        b = subsample_pool(pool, 5, None, RngStream(s).child("c"))
        hits_two[a.metadata["class_origin"]] += 1
        hits_one[b.metadata["class_origin"]] += 1
    expected = 400 * 5 / 12
    assert np.all(np.abs(hits_two - expected) < 0.25 * expected)
    assert np.all(np.abs(hits_one - expected) < 0.25 * expected)


def test_select_and_split():
    pool = make_heterogeneous_pool(3, 6, 2, 3, 1.0, 0.5, RngStream(0))
    parts = split_pool(pool, [9, 3, 6], RngStream(1))
    origins = [set(p.metadata["class_origin"]) for p in parts]
    assert sum(len(o) for o in origins) == 18 and len(set.union(*origins)) == 18
    strat = split_pool(pool, [9, 3, 6], RngStream(1), stratify_subs=True)
    for p, n in zip(strat, [3, 1, 2]):
        assert np.array_equal(np.bincount(p.class_subs), [n, n, n])
    with pytest.raises(PoolError):
        split_pool(pool, [10, 10], RngStream(1))
    with pytest.raises(PoolError):
        split_pool(pool, [4, 3], RngStream(1), stratify_subs=True)
    with pytest.raises(PoolError):
        select_classes(pool, [0, 0])
    with pytest.raises(PoolError, match="empty"):
        select_classes(pool, [])


# -- episodes -------------------------------------------------------------------------


def _check_episode(ep, spec):
    C, K, M = spec.ways, spec.shots, spec.val_per_class
    assert ep.support_x.shape[0] == C * K and ep.val_x.shape[0] == C * M
    assert np.array_equal(np.bincount(ep.support_y, minlength=C), np.full(C, K))
    assert np.array_equal(np.bincount(ep.val_y, minlength=C), np.full(C, M))
    assert len(np.intersect1d(ep.support_index, ep.val_index)) == 0
    assert sorted(set(ep.support_y.tolist())) == list(range(C))
    assert np.all(np.diff(ep.class_ids) > 0)


def test_episode_sizes_and_disjointness():
    pool = gauss(C=10, n=20)
    spec = EpisodeSpec(5, 1, 15)
    ep = sample_episode(pool, spec, RngStream(0))
    assert len(ep.support_y) == 5 and len(ep.val_y) == 75
    _check_episode(ep, spec)


def test_episode_labels_follow_pool_classes():
    pool = gauss(C=10, n=20)
    ep = sample_episode(pool, EpisodeSpec(4, 2, 3), RngStream(1))
    assert np.array_equal(pool.class_ids[ep.support_index], ep.class_ids[ep.support_y])
    assert np.array_equal(pool.class_ids[ep.val_index], ep.class_ids[ep.val_y])
    assert np.array_equal(pool.features[ep.val_index], ep.val_x)


def test_episode_exhausts_exact_class():
    pool = gauss(C=3, n=5)
    ep = sample_episode(pool, EpisodeSpec(3, 2, 3), RngStream(0))
    assert sorted(np.concatenate([ep.support_index, ep.val_index]).tolist()) == list(range(15))


def test_episode_is_deterministic():
    pool = gauss(C=10, n=20)
    a = sample_episode(pool, EpisodeSpec(5, 1, 3), RngStream(3).child(1))
    b = sample_episode(pool, EpisodeSpec(5, 1, 3), RngStream(3).child(1))
    assert np.array_equal(a.support_index, b.support_index) and np.array_equal(a.val_index, b.val_index)


def test_episode_errors_name_the_deficit():
    pool = gauss(C=4, n=5)
    with pytest.raises(PoolError, match="need 5 classes but only 4"):
        sample_episode(pool, EpisodeSpec(5, 1, 1), RngStream(0))
    with pytest.raises(PoolError, match="has 5 instances.*needs 6"):
        sample_episode(pool, EpisodeSpec(2, 1, 5), RngStream(0))
    with pytest.raises(PoolError, match="domain 1 not present"):
        sample_episode(pool, EpisodeSpec(2, 1, 1, 1, 1), RngStream(0))
    with pytest.raises(PoolError):
        EpisodeSpec(1, 1, 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 3), st.integers(1, 4), st.integers(0, 10_000))
def test_episode_invariants(ways, shots, val, seed):
    pool = gauss(C=7, n=8)
    spec = EpisodeSpec(ways, shots, val)
    if shots + val > 8:
        with pytest.raises(PoolError):
            sample_episode(pool, spec, RngStream(seed))
        return
    _check_episode(sample_episode(pool, spec, RngStream(seed)), spec)


def test_cross_domain_split_with_equal_domains_is_same_domain_split():
    idx = np.arange(3, 40, 2)
    for s in range(50):
        a = _cross_domain_split(np.random.default_rng(s), idx, idx.copy(), 3, 4)
        b = _same_domain_split(np.random.default_rng(s), idx, 3, 4)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_cross_domain_episode_tags_and_domains():
    base = gauss(C=6, n=6)
    pool = make_two_domain_pool(base, 2 * np.eye(3), np.ones(3), 0.0, RngStream(1))
    ep = sample_episode(pool, EpisodeSpec(3, 2, 3, 1, 0), RngStream(2))
    assert (ep.source_domain, ep.target_domain) == (1, 0)
    assert np.all(pool.domain_ids[ep.support_index] == 1)
    assert np.all(pool.domain_ids[ep.val_index] == 0)
    assert np.array_equal(pool.class_ids[ep.support_index], ep.class_ids[ep.support_y])
    with pytest.raises(PoolError, match="lacks instances"):
        sample_episode(pool, EpisodeSpec(3, 7, 1, 1, 0), RngStream(2))


def test_restricted_sampling_stays_in_one_sub():
    pool = make_heterogeneous_pool(3, 5, 2, 4, 1.0, 0.5, RngStream(0))
    for i in range(30):
        ep = sample_task(pool, EpisodeSpec(3, 1, 2), RngStream(1).child(i), by_sub=True)
        assert len(set(pool.class_subs[ep.class_ids].tolist())) == 1
    ep = sample_episode(pool, EpisodeSpec(5, 1, 1), RngStream(0), restrict_sub=2)
    assert set(pool.class_subs[ep.class_ids].tolist()) == {2}
    with pytest.raises(PoolError, match="sub-distribution"):
        sample_task(gauss(), EpisodeSpec(2, 1, 1), RngStream(0), by_sub=True)


def test_trial_pool_picks_a_trial_and_skips_small_classes():
    x = np.arange(12, dtype=float)[:, None]
    big = ClassPool(x, [0] * 4 + [1] * 4 + [2] * 4, [0] * 12)
    lopsided = ClassPool(x, [0] * 4 + [1] * 4 + [2] * 3 + [3], [0] * 12)
    tp = TrialPool([big, lopsided])
    seen = set()
    for i in range(40):
        ep = tp.sample_episode(EpisodeSpec(3, 1, 2), RngStream(0).child(i))
        seen.add(tuple(ep.class_ids))
    assert (0, 1, 2) in seen and all(3 not in s for s in seen)
    with pytest.raises(PoolError):
        sample_episode(lopsided, EpisodeSpec(3, 1, 2), RngStream(0))


def test_meta_example_from_arrays():
    ep = MetaExample.from_arrays([[0.0], [1.0]], [0, 1], [[0.2]], [0])
    assert ep.ways == 2 and list(ep.val_index) == [2]
