import numpy as np
import pytest

from shillforge import graphdata as gd
from shillforge.errors import ParseError, ValidationError
from shillforge.graphdata import RatingGraph, SyntheticSpec


def graph_from_triples(triples, labels, L=5):
    """triples: (user_id, item_id, rating); labels: user_id -> label."""
    users, items = {}, {}
    for u, i, _ in triples:
        users.setdefault(u, len(users))
        items.setdefault(i, len(items))
    return RatingGraph(
        tuple(users), tuple(items),
        tuple(labels.get(u, "normal") for u in users),
        np.array([users[t[0]] for t in triples]),
        np.array([items[t[1]] for t in triples]),
        np.array([t[2] for t in triples]),
        L,
    )


def write_csv(tmp_path, rows):
    p = tmp_path / "edges.csv"
    p.write_text("user_id,item_id,rating,label\n" + "\n".join(rows) + "\n")
    return p


# --- construction invariants -------------------------------------------------


def test_rejects_duplicate_edge():
    with pytest.raises(ValidationError):
        graph_from_triples([("a", "x", 5), ("a", "x", 3)], {})


def test_rejects_out_of_range_rating():
    with pytest.raises(ValidationError):
        graph_from_triples([("a", "x", 7)], {})
    with pytest.raises(ValidationError):
        graph_from_triples([("a", "x", 0)], {})


def test_rejects_dangling_edge_index():
    with pytest.raises(ValidationError):
        RatingGraph(("a",), ("x",), ("normal",), np.array([1]), np.array([0]), np.array([3]))


def test_rejects_unknown_label():
    with pytest.raises(ValidationError):
        graph_from_triples([("a", "x", 3)], {"a": "bot"})


# --- load_csv ----------------------------------------------------------------


def test_load_basic(tmp_path):
    p = write_csv(tmp_path, ["a,x,5,normal", "b,x,3,normal", "a,y,4,normal"])
    g = gd.load_csv(p)
    assert g.n_users == 2 and g.n_items == 2 and g.n_edges == 3
    assert g.user_ids == ("a", "b") and g.item_ids == ("x", "y")


def test_load_two_users_one_item(tmp_path):
    # 3-row file, users {a,b}, single item, ratings {5,3}
    p = write_csv(tmp_path, ["a,x,5,normal", "b,x,3,fake", "b,x,3,fake"])
    with pytest.warns(UserWarning):
        g = gd.load_csv(p)
    assert g.n_users == 2 and g.n_items == 1 and g.n_edges == 2
    assert g.labels == ("normal", "fake")


def test_load_rating_out_of_range(tmp_path):
    p = write_csv(tmp_path, ["a,x,7,normal"])
    with pytest.raises(ValidationError):
        gd.load_csv(p, L=5)


def test_load_duplicate_last_wins(tmp_path):
    p = write_csv(tmp_path, ["a,x,5,normal", "a,x,3,normal"])
    with pytest.warns(UserWarning, match="1 duplicate"):
        g = gd.load_csv(p)
    assert g.n_edges == 1
    assert g.edge_ratings[0] == 3


def test_load_malformed_row_reports_line(tmp_path):
    p = write_csv(tmp_path, ["a,x,5,normal", "b,y,oops,normal"])
    with pytest.raises(ParseError) as exc:
        gd.load_csv(p)
    assert exc.value.line == 3


def test_load_wrong_field_count(tmp_path):
    p = write_csv(tmp_path, ["a,x,5"])
    with pytest.raises(ParseError):
        gd.load_csv(p)


def test_load_bad_header(tmp_path):
    p = tmp_path / "edges.csv"
    p.write_text("user,item,r,l\na,x,5,normal\n")
    with pytest.raises(ParseError) as exc:
        gd.load_csv(p)
    assert exc.value.line == 1


def test_load_inconsistent_label(tmp_path):
    p = write_csv(tmp_path, ["a,x,5,normal", "a,y,4,fake"])
    with pytest.raises(ValidationError):
        gd.load_csv(p)


def test_save_load_roundtrip(tmp_path):
    g = gd.synthesize(SyntheticSpec(20, 10, 2, 3.0, seed=5))
    p = tmp_path / "g.csv"
    gd.save_csv(g, p)
    g2 = gd.load_csv(p, L=g.L)

    def triples(graph):
        return sorted(
            (graph.user_ids[u], graph.item_ids[i], int(r))
            for u, i, r in zip(graph.edge_users, graph.edge_items, graph.edge_ratings)
        )

    # table order may differ (first appearance in the file); content must not
    assert triples(g2) == triples(g)
    assert dict(zip(g2.user_ids, g2.labels)) == dict(zip(g.user_ids, g.labels))


def test_save_rejects_injected(tmp_path):
    g = graph_from_triples([("a", "x", 3), ("b", "x", 4)], {})
    g = g.extend_with_users(["f0"], gd.LABEL_INJECTED, [(0, 0, 5)])
    with pytest.raises(ValidationError):
        gd.save_csv(g, tmp_path / "g.csv")


# --- prune_min_degree --------------------------------------------------------


def test_prune_fixed_point_untouched():
    g = graph_from_triples(
        [("u1", "i1", 3), ("u1", "i2", 4), ("u2", "i1", 2), ("u2", "i2", 5)], {}
    )
    out = gd.prune_min_degree(g)
    assert out.user_ids == g.user_ids and out.item_ids == g.item_ids
    assert out.n_edges == 4


def test_prune_cascade_to_empty():
    # u2 (deg 1) goes, then i1, then u1, then i2: nothing left
    g = graph_from_triples([("u1", "i1", 3), ("u1", "i2", 4), ("u2", "i1", 2)], {})
    out = gd.prune_min_degree(g)
    assert out.n_users == 0 and out.n_items == 0 and out.n_edges == 0


def test_prune_four_cycle_kept():
    g = graph_from_triples(
        [("u1", "i1", 3), ("u2", "i1", 4), ("u2", "i2", 2), ("u1", "i2", 5)], {}
    )
    out = gd.prune_min_degree(g)
    assert out.n_users == 2 and out.n_items == 2


def test_prune_idempotent():
    g = gd.synthesize(SyntheticSpec(40, 15, 4, 2.5, seed=3))
    once = gd.prune_min_degree(g)
    twice = gd.prune_min_degree(once)
    assert once.user_ids == twice.user_ids and once.item_ids == twice.item_ids
    assert once.n_edges == twice.n_edges


def _peel_sequential(g, rng, min_records=2):
    """Order-randomized one-at-a-time peeling; oracle for the fixed point."""
    users = set(range(g.n_users))
    items = set(range(g.n_items))
    edges = list(zip(g.edge_users.tolist(), g.edge_items.tolist()))
    while True:
        du, di = {}, {}
        for u, i in edges:
            if u in users and i in items:
                du[u] = du.get(u, 0) + 1
                di[i] = di.get(i, 0) + 1
        bad_u = [u for u in users if du.get(u, 0) < min_records]
        bad_i = [i for i in items if di.get(i, 0) < min_records]
        pool = [("u", u) for u in bad_u] + [("i", i) for i in bad_i]
        if not pool:
            return users, items
        kind, node = pool[rng.integers(len(pool))]
        (users if kind == "u" else items).discard(node)


@pytest.mark.parametrize("seed", range(50))
def test_prune_order_independent(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(4, 12)), int(rng.integers(3, 9))
    pairs = set()
    for _ in range(int(rng.integers(3, n * m // 2 + 4))):
        pairs.add((int(rng.integers(n)), int(rng.integers(m))))
    pairs = sorted(pairs)
    g = RatingGraph(
        tuple(f"u{k}" for k in range(n)), tuple(f"i{k}" for k in range(m)),
        tuple(["normal"] * n),
        np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]),
        np.full(len(pairs), 3),
    )
    out = gd.prune_min_degree(g)
    users, items = _peel_sequential(g, rng)
    assert set(out.user_ids) == {f"u{k}" for k in users}
    assert set(out.item_ids) == {f"i{k}" for k in items}


# --- split -------------------------------------------------------------------


def _chain_graph(n_normal_edges, labels=None):
    triples = [(f"u{k % 5}", f"i{k}", 3) for k in range(n_normal_edges)]
    return graph_from_triples(triples, labels or {})


def test_split_exact_count():
    g = _chain_graph(10)
    s = gd.split(g, test_frac=0.2, seed=1)
    assert len(s.test_users) == 2
    assert s.train.n_edges == 8


def test_split_deterministic():
    g = gd.synthesize(SyntheticSpec(30, 12, 3, 3.0, seed=9))
    a = gd.split(g, seed=4)
    b = gd.split(g, seed=4)
    np.testing.assert_array_equal(a.test_users, b.test_users)
    np.testing.assert_array_equal(a.test_items, b.test_items)
    c = gd.split(g, seed=5)
    assert not (
        len(c.test_users) == len(a.test_users)
        and np.array_equal(np.sort(a.test_users * 1000 + a.test_items),
                           np.sort(c.test_users * 1000 + c.test_items))
    )


def test_split_bad_frac():
    g = _chain_graph(10)
    for f in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValidationError):
            gd.split(g, test_frac=f)


def test_split_needs_normal_edges():
    g = graph_from_triples([("a", "x", 3), ("b", "x", 2)], {"a": "fake", "b": "fake"})
    with pytest.raises(ValidationError):
        gd.split(g)


def test_split_only_normal_users_held_out():
    labels = {"u0": "fake"}
    g = _chain_graph(25, labels)
    s = gd.split(g, test_frac=0.25, seed=2)
    for u in s.test_users:
        assert g.labels[u] == "normal"


def test_split_reconstructs_edge_multiset():
    g = gd.synthesize(SyntheticSpec(25, 10, 3, 3.0, seed=11))
    s = gd.split(g, seed=0)
    orig = sorted(zip(g.edge_users, g.edge_items, g.edge_ratings))
    back = sorted(
        list(zip(s.train.edge_users, s.train.edge_items, s.train.edge_ratings))
        + list(zip(s.test_users, s.test_items, s.test_ratings))
    )
    assert orig == back


# --- synthesize --------------------------------------------------------------


def test_synthesize_deterministic():
    spec = SyntheticSpec(50, 20, 5, 4.0, seed=7)
    a, b = gd.synthesize(spec), gd.synthesize(spec)
    assert a.user_ids == b.user_ids and a.labels == b.labels
    np.testing.assert_array_equal(a.edge_ratings, b.edge_ratings)
    np.testing.assert_array_equal(a.edge_items, b.edge_items)


def test_synthesize_no_fakes_all_normal():
    g = gd.synthesize(SyntheticSpec(20, 10, 0, 3.0, seed=1))
    assert all(lab == "normal" for lab in g.labels)


def test_synthesize_fake_count():
    g = gd.synthesize(SyntheticSpec(40, 15, 6, 3.0, seed=2))
    assert sum(lab == "fake" for lab in g.labels) == 6


def test_synthesize_survives_pruning():
    kept = []
    for seed in range(10):
        g = gd.synthesize(SyntheticSpec(60, 20, 3, 4.0, seed=seed))
        kept.append(gd.prune_min_degree(g).n_users / g.n_users)
    assert np.mean(kept) >= 0.9


def test_synthesize_ratings_track_item_bias():
    # normal ratings should concentrate within +-1 of the item's latent mean
    close = []
    for seed in range(10):
        spec = SyntheticSpec(60, 20, 0, 5.0, seed=seed)
        g = gd.synthesize(spec)
        rng = np.random.default_rng(seed)
        lo, hi = spec.rating_bias
        bias = rng.uniform(lo, hi, size=spec.n_items)  # same first draw as the generator
        close.append(np.mean(np.abs(g.edge_ratings - bias[g.edge_items]) <= 1.0))
    assert np.mean(close) >= 0.8


def test_synthetic_spec_validation():
    with pytest.raises(ValidationError):
        SyntheticSpec(0, 10, 0, 3.0)
    with pytest.raises(ValidationError):
        SyntheticSpec(10, 10, 10, 3.0)
    with pytest.raises(ValidationError):
        SyntheticSpec(10, 10, 1, 1.0)
    with pytest.raises(ValidationError):
        SyntheticSpec(10, 10, 1, 3.0, rating_bias=(0.5, 6.0))


# --- user_features -----------------------------------------------------------


def test_features_hand_vector():
    # ratings {5,5} with L=5: raw [2, 5, 0, 1, 0]; paired with a {1,3} user
    g = graph_from_triples(
        [("a", "x", 5), ("a", "y", 5), ("b", "x", 1), ("b", "y", 3), ("b", "z", 3)], {}
    )
    feats = gd.user_features(g)
    # raw a = [2, 5, 0, 1, 0]; raw b = [3, 7/3, 8/9, 0, 1/3]
    expect_a = np.array([0.0, 1.0, 0.0, 1.0, 0.0])
    np.testing.assert_allclose(feats[0], expect_a, atol=1e-12)
    np.testing.assert_allclose(feats[1], 1.0 - expect_a, atol=1e-12)


def test_features_identical_users_all_zero():
    g = graph_from_triples([("a", "x", 4), ("a", "y", 2), ("b", "x", 4), ("b", "y", 2)], {})
    np.testing.assert_array_equal(gd.user_features(g), np.zeros((2, 5)))


def test_features_single_rating_variance_zero():
    g = graph_from_triples([("a", "x", 3), ("a", "y", 3), ("b", "x", 1), ("b", "y", 5)], {})
    feats_raw_var_a = 0.0
    feats = gd.user_features(g)
    assert feats[0][2] == feats_raw_var_a  # a's two identical ratings
    assert feats[1][2] == 1.0


def test_features_in_unit_interval():
    g = gd.synthesize(SyntheticSpec(50, 20, 5, 4.0, seed=13))
    f = gd.user_features(g)
    assert f.shape == (50, 5)
    assert f.min() >= 0.0 and f.max() <= 1.0


# --- candidate_items ---------------------------------------------------------


def _star_graph():
    # t rated by u, u also rates i2; v rates i3 only (disconnected from t)
    return graph_from_triples(
        [("u", "t", 4), ("u", "i2", 3), ("v", "i3", 5)], {}
    )


def test_candidates_zero_hops():
    g = _star_graph()
    assert gd.candidate_items(g, {"t"}, hops=0) == {"t"}


def test_candidates_two_hops_star():
    g = _star_graph()
    assert gd.candidate_items(g, {"t"}, hops=2) == {"t", "i2"}


def test_candidates_exclude_disconnected():
    g = _star_graph()
    assert "i3" not in gd.candidate_items(g, {"t"}, hops=6)


def test_candidates_unknown_target():
    g = _star_graph()
    with pytest.raises(ValidationError):
        gd.candidate_items(g, {"nope"})


@pytest.mark.parametrize("seed", range(10))
def test_candidates_monotone_in_hops(seed):
    g = gd.synthesize(SyntheticSpec(30, 25, 0, 3.0, seed=seed))
    targets = {g.item_ids[0], g.item_ids[7]}
    prev = gd.candidate_items(g, targets, hops=0)
    for h in (2, 4, 6):
        cur = gd.candidate_items(g, targets, hops=h)
        assert prev <= cur
        prev = cur


def test_candidates_match_bfs_oracle():
    rng = np.random.default_rng(21)
    for _ in range(10):
        g = gd.synthesize(SyntheticSpec(20, 15, 0, 2.5, seed=int(rng.integers(1000))))
        target = g.item_ids[int(rng.integers(g.n_items))]
        # plain BFS over the bipartite adjacency, distances in hops
        adj_u = [[] for _ in range(g.n_users)]
        adj_i = [[] for _ in range(g.n_items)]
        for u, i in zip(g.edge_users, g.edge_items):
            adj_u[u].append(i)
            adj_i[i].append(u)
        dist = {("i", g.item_index(target)): 0}
        frontier = [("i", g.item_index(target))]
        d = 0
        while frontier:
            d += 1
            nxt = []
            for kind, node in frontier:
                neigh = (("u", v) for v in adj_i[node]) if kind == "i" else (
                    ("i", v) for v in adj_u[node])
                for key in neigh:
                    if key not in dist:
                        dist[key] = d
                        nxt.append(key)
            frontier = nxt
        for hops in (0, 2, 4):
            want = {g.item_ids[n] for (k, n), dd in dist.items() if k == "i" and dd <= hops}
            assert gd.candidate_items(g, {target}, hops=hops) == want


# --- extension ---------------------------------------------------------------


def test_extend_with_users():
    g = graph_from_triples([("a", "x", 3), ("b", "y", 4)], {})
    g2 = g.extend_with_users(["f0", "f1"], gd.LABEL_INJECTED, [(0, 0, 5), (1, 1, 5), (1, 0, 1)])
    assert g2.n_users == 4 and g2.n_edges == 5
    assert g2.labels[2:] == (gd.LABEL_INJECTED, gd.LABEL_INJECTED)
    assert g.n_users == 2  # original untouched


def test_extend_rejects_existing_id():
    g = graph_from_triples([("a", "x", 3)], {})
    with pytest.raises(ValidationError):
        g.extend_with_users(["a"], gd.LABEL_INJECTED, [])
