import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossshape.collection_graph import CollectionGraph, attach_test_shapes, init_graph, reweight, update_graph
from crossshape.compatibility import score_matrix
from crossshape.geometry import d2_descriptor, generate_collection


def random_setup(seed, n=12, n_val=3, d=4):
    r = np.random.default_rng(seed)
    ids = [f"s{i}" for i in range(n)]
    splits = ["train"] * (n - n_val) + ["val"] * n_val
    desc = r.normal(size=(n, d))
    return ids, splits, desc, r.normal(size=(d, d)), r.normal(size=(d, d))


def test_init_example():
    e1, e2 = [1.0, 0], [0.0, 1]
    g = init_graph(["a", "b", "c"], ["train"] * 3, 1, np.array([e1, e1, e2]))
    assert g.neighbors("a") == ["b"] and g.neighbors("b") == ["a"]
    # c is equidistant from a and b; the lower index wins
    assert g.neighbors("c") == ["a"]
    assert g.weights("a") == [0.5, 0.5]
    g.check()


def test_init_matches_full_sort_oracle():
    shapes = generate_collection(["chair", "table"], 50, 256, seed=5)
    desc = np.stack([d2_descriptor(s) for s in shapes])
    ids = [s.shape_id for s in shapes]
    splits = ["train"] * 40 + ["val"] * 10
    g = init_graph(ids, splits, 3, desc)
    for m in range(50):
        cand = sorted((float(((desc[m] - desc[n]) ** 2).sum()), n) for n in range(40) if n != m)
        assert g.neighbors(ids[m]) == [ids[n] for _, n in cand[:3]]
        assert len(g.edges[ids[m]]) == 3
    g.check()


def test_init_errors():
    with pytest.raises(ValueError):
        init_graph(["a", "b"], ["train", "val"], 1, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        init_graph(["a", "b"], ["train", "bogus"], 0, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        init_graph(["a"], ["train"], 0, np.zeros((2, 2)))


def test_update_matches_argmax_oracle():
    ids, splits, desc, Vq, Vk = random_setup(0, n=20, n_val=5)
    g = init_graph(ids, splits, 3, desc)
    new = update_graph(g, dict(zip(ids, desc)), Vq, Vk)
    S = score_matrix(desc, Vq, Vk)
    for m in range(20):
        ranked = sorted(((-S[m, n], n) for n in range(15) if n != m))[:3]
        assert new.neighbors(ids[m]) == [ids[n] for _, n in ranked]
        s = np.array([S[m, m]] + [S[m, n] for _, n in ranked])
        ref = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        np.testing.assert_allclose(new.weights(ids[m]), ref, atol=1e-12)
    assert new.version == g.version + 1
    assert g.version == 0
    new.check()


def test_val_nodes_are_rewired_to_train():
    ids, splits, desc, Vq, Vk = random_setup(1)
    g = init_graph(ids, splits, 2, desc)
    new = update_graph(g, dict(zip(ids, desc)), Vq, Vk)
    for m in ids[-3:]:
        assert all(new.splits[n] == "train" for n in new.neighbors(m))


def test_update_is_deterministic():
    ids, splits, desc, Vq, Vk = random_setup(2)
    g = init_graph(ids, splits, 2, desc)
    d = dict(zip(ids, desc))
    a, b = update_graph(g, d, Vq, Vk), update_graph(g, d, Vq, Vk)
    assert a.edges == b.edges
    assert update_graph(a, d, Vq, Vk).edges == a.edges


@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 4))
def test_monotone_selection_and_invariants(seed, k):
    ids, splits, desc, Vq, Vk = random_setup(seed)
    g = update_graph(init_graph(ids, splits, k, desc), dict(zip(ids, desc)), Vq, Vk)
    g.check()
    S = score_matrix(desc, Vq, Vk)
    pos = {n: i for i, n in enumerate(ids)}
    for m in ids:
        chosen = [pos[n] for n in g.neighbors(m)]
        assert len(chosen) == k and pos[m] not in chosen
        if not chosen:
            continue
        floor = min(S[pos[m], n] for n in chosen)
        for n in range(9):
            if n != pos[m] and n not in chosen:
                assert S[pos[m], n] <= floor
        assert sum(g.weights(m)) == pytest.approx(1.0, abs=1e-6)


def test_reweight_keeps_neighbours():
    ids, splits, desc, Vq, Vk = random_setup(3)
    g = init_graph(ids, splits, 2, desc)
    r = reweight(g, dict(zip(ids, desc)), Vq, Vk)
    for m in ids:
        assert r.neighbors(m) == g.neighbors(m)
        assert r.weights(m) != g.weights(m)
    r.check()


def test_attach_test_shapes():
    ids, splits, desc, Vq, Vk = random_setup(4)
    g = update_graph(init_graph(ids, splits, 2, desc), dict(zip(ids, desc)), Vq, Vk)
    assert attach_test_shapes(g, [], {}, Vq, Vk).edges == g.edges
    r = np.random.default_rng(9)
    tdesc = {f"t{i}": r.normal(size=4) for i in range(3)}
    all_desc = {**dict(zip(ids, desc)), **tdesc}
    new = attach_test_shapes(g, list(tdesc), all_desc, Vq, Vk)
    new.check()
    for i in ids:
        assert new.edges[i] == g.edges[i]
    stacked = np.stack([all_desc[i] for i in new.ids])
    S = score_matrix(stacked, Vq, Vk)
    for t in tdesc:
        m = new.ids.index(t)
        assert all(new.splits[n] == "train" for n in new.neighbors(t))
        ranked = sorted((-S[m, n], n) for n in range(9))[:2]
        assert new.neighbors(t) == [new.ids[n] for _, n in ranked]
    assert new.version == g.version
    with pytest.raises(ValueError):
        attach_test_shapes(new, ["t0"], all_desc, Vq, Vk)


def test_attach_needs_train_nodes():
    g = CollectionGraph(0, {"v": "val"}, {"v": []})
    with pytest.raises(ValueError):
        attach_test_shapes(g, ["t"], {"v": np.ones(2), "t": np.ones(2)}, np.eye(2), np.eye(2))


def test_check_errors():
    base = dict(splits={"a": "train", "b": "train", "v": "val"})
    bad = [
        {"a": [("b", 0.5)], "b": [], "v": [("a", 0.5)]},
        {"a": [("a", 0.5)], "b": [("a", 0.5)], "v": [("a", 0.5)]},
        {"a": [("v", 0.5)], "b": [("a", 0.5)], "v": [("a", 0.5)]},
        {"a": [("b", -0.5)], "b": [("a", 0.5)], "v": [("a", 0.5)]},
        {"a": [("b", 1.5)], "b": [("a", 0.5)], "v": [("a", 0.5)]},
    ]
    for edges in bad:
        with pytest.raises(ValueError):
            CollectionGraph(1, dict(base["splits"]), edges).check()
    CollectionGraph(1, dict(base["splits"]), {"a": [("b", 0.5)], "b": [("a", 0.2)], "v": [("a", 0.9)]}).check()


def test_update_requires_all_descriptors():
    ids, splits, desc, Vq, Vk = random_setup(5)
    g = init_graph(ids, splits, 1, desc)
    with pytest.raises(KeyError):
        update_graph(g, dict(zip(ids[:-1], desc)), Vq, Vk)
