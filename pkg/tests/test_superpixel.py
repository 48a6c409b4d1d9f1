import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthfuse.errors import ParseError, UsageError
from depthfuse.netcore import FeatureMap
from depthfuse.superpixel import (
    SuperpixelPool,
    appearance_features,
    load_graph,
    oversegment,
    save_graph,
    similarity,
)
from helpers import assert_grad_close


def _two_tone(h=6, w=6):
    img = np.zeros((h, w, 3))
    img[:, w // 2 :] = 1.0
    return img


def test_grid_4x4_target_4():
    graph = oversegment(np.zeros((4, 4, 3)), 4, method="grid")
    assert len(graph) == 4
    assert all(node.size == 4 for node in graph.nodes)


def test_target_one_single_superpixel():
    graph = oversegment(_two_tone(), 1, method="grid")
    assert len(graph) == 1
    assert graph.nodes[0].size == 36
    assert graph.edges == []


def test_target_count_out_of_range():
    with pytest.raises(ValueError):
        oversegment(np.zeros((4, 4, 3)), 0)
    with pytest.raises(ValueError):
        oversegment(np.zeros((4, 4, 3)), 17)


def test_unknown_method():
    with pytest.raises(ValueError):
        oversegment(np.zeros((4, 4, 3)), 4, method="watershed")


@settings(max_examples=25, deadline=None)
@given(
    h=st.integers(4, 14),
    w=st.integers(4, 14),
    target=st.integers(1, 12),
    method=st.sampled_from(["grid", "slic"]),
    seed=st.integers(0, 5),
)
def test_partition_invariants(h, w, target, method, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((h, w, 3))
    graph = oversegment(img, min(target, h * w), method=method, with_similarities=False)
    total = sum(node.size for node in graph.nodes)
    assert total == h * w
    seen = set()
    for node in graph.nodes:
        for r, c in node.pixel_indices:
            assert (r, c) not in seen
            seen.add((r, c))
        cr, cc = node.centroid
        assert np.isclose(cr, node.pixel_indices[:, 0].mean())
        assert np.isclose(cc, node.pixel_indices[:, 1].mean())


def test_grid_node_count_near_target():
    rng = np.random.default_rng(0)
    for target in (3, 4, 9, 16, 25):
        graph = oversegment(rng.random((20, 30, 3)), target, method="grid",
                            with_similarities=False)
        assert abs(len(graph) - target) <= max(1, 0.2 * target)


def test_slic_nearest_center_oracle():
    """After convergence every pixel must sit with its nearest center in the
    joint (scaled position, color) metric; centers are the cluster means."""
    img = _two_tone()
    graph = oversegment(img, 4, method="slic", with_similarities=False)
    h, w = img.shape[:2]
    step = np.sqrt(h * w / 4)
    compactness = 0.2
    feats = np.concatenate(
        [
            np.stack(np.meshgrid(np.arange(h), np.arange(w), indexing="ij"), -1)
            .reshape(-1, 2)
            .astype(float)
            * (compactness / step),
            img.reshape(-1, 3),
        ],
        axis=1,
    )
    labels = graph.label_map.ravel()
    centers = np.stack([feats[labels == i].mean(axis=0) for i in range(len(graph))])
    d2 = ((feats[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assert np.array_equal(d2.argmin(axis=1), labels)


def test_edges_connect_adjacent_only():
    rng = np.random.default_rng(1)
    graph = oversegment(rng.random((10, 10, 3)), 9, method="grid", with_similarities=False)
    lab = graph.label_map
    adjacent = set()
    adjacent.update(
        (min(a, b), max(a, b))
        for a, b in zip(lab[:, :-1].ravel(), lab[:, 1:].ravel()) if a != b
    )
    adjacent.update(
        (min(a, b), max(a, b))
        for a, b in zip(lab[:-1, :].ravel(), lab[1:, :].ravel()) if a != b
    )
    for p, q, _ in graph.edges:
        assert p < q
        assert (p, q) in adjacent


def test_similarity_identical_regions():
    img = np.full((4, 4, 3), 0.5)
    graph = oversegment(img, 2, method="grid", with_similarities=False)
    assert np.allclose(similarity(0, 1, img, graph, gamma=1.0), 1.0)


def test_similarity_gamma_zero():
    rng = np.random.default_rng(2)
    img = rng.random((4, 4, 3))
    graph = oversegment(img, 2, method="grid", with_similarities=False)
    assert np.allclose(similarity(0, 1, img, graph, gamma=0.0), 1.0)


def test_similarity_mean_color_hand_value():
    # uniform black and white patches: mean-color distance sqrt(3)
    img = _two_tone(2, 2)
    graph = oversegment(img, 2, method="grid", with_similarities=False)
    s = similarity(0, 1, img, graph, gamma=1.0)
    assert np.isclose(s[0], np.exp(-np.sqrt(3.0)), atol=1e-12)
    assert abs(s[0] - 0.1769) < 1e-3


def test_similarity_symmetric_and_bounded():
    rng = np.random.default_rng(3)
    img = rng.random((6, 6, 3))
    graph = oversegment(img, 4, method="grid", with_similarities=False)
    a = similarity(0, 3, img, graph, gamma=2.0)
    b = similarity(3, 0, img, graph, gamma=2.0)
    assert np.array_equal(a, b)
    assert np.all(a > 0) and np.all(a <= 1)


def test_similarity_decreasing_in_distance():
    # three patches with increasing color distance from the first
    img = np.zeros((2, 6, 3))
    img[:, 2:4] = 0.3
    img[:, 4:] = 0.9
    graph = oversegment(img, 3, method="grid", with_similarities=False)
    near = similarity(0, 1, img, graph, gamma=1.0)[0]
    far = similarity(0, 2, img, graph, gamma=1.0)[0]
    assert near > far


def test_pool_constant_map():
    rng = np.random.default_rng(4)
    img = rng.random((4, 4, 3))
    graph = oversegment(img, 4, method="grid", with_similarities=False)
    fm = FeatureMap(np.full((1, 3, 4, 4), 2.5))
    vecs = SuperpixelPool().forward(fm, graph)
    assert np.allclose(vecs, 2.5)


def test_pool_single_superpixel_global_mean():
    rng = np.random.default_rng(5)
    img = rng.random((4, 4, 3))
    graph = oversegment(img, 1, method="grid", with_similarities=False)
    data = rng.standard_normal((1, 2, 4, 4))
    vecs = SuperpixelPool().forward(FeatureMap(data), graph)
    assert np.allclose(vecs[0], data[0].reshape(2, -1).mean(axis=1))


def test_pool_matches_enumeration_and_finite_differences():
    rng = np.random.default_rng(6)
    img = rng.random((4, 4, 3))
    graph = oversegment(img, 2, method="grid", with_similarities=False)
    data = rng.standard_normal((1, 1, 4, 4))
    pool = SuperpixelPool()
    vecs = pool.forward(FeatureMap(data), graph)
    # brute-force enumeration: stride 1, cell centers are the pixels themselves
    expected = np.zeros((len(graph), 1))
    for node in graph.nodes:
        vals = [data[0, 0, r, c] for r, c in node.pixel_indices]
        expected[node.id, 0] = np.mean(vals)
    assert np.allclose(vecs, expected)

    proj = rng.standard_normal(vecs.shape)

    def f():
        return float((SuperpixelPool().forward(FeatureMap(data), graph) * proj).sum())

    dmap = pool.backward(proj)
    assert_grad_close(f, data, dmap, tol=1e-4)


def test_pool_writes_feature_map_grad():
    rng = np.random.default_rng(7)
    img = rng.random((4, 4, 3))
    graph = oversegment(img, 2, method="grid", with_similarities=False)
    fm = FeatureMap(rng.standard_normal((1, 2, 4, 4)))
    pool = SuperpixelPool()
    vecs = pool.forward(fm, graph)
    dmap = pool.backward(np.ones_like(vecs))
    assert np.array_equal(fm.grad, dmap)


def test_pool_fallback_records_diagnostics():
    rng = np.random.default_rng(8)
    img = rng.random((4, 4, 3))
    graph = oversegment(img, 4, method="grid", with_similarities=False)
    fm = FeatureMap(rng.standard_normal((1, 1, 1, 1)))  # single cell, 4 nodes
    pool = SuperpixelPool()
    vecs = pool.forward(fm, graph)
    assert len(pool.fallback_nodes_) == 3
    assert np.allclose(vecs, fm.data[0, 0, 0, 0])


def test_pool_backward_before_forward():
    with pytest.raises(UsageError):
        SuperpixelPool().backward(np.zeros((2, 2)))


def test_max_aggregator_routes_to_argmax():
    rng = np.random.default_rng(9)
    img = rng.random((2, 4, 3))
    graph = oversegment(img, 2, method="grid", with_similarities=False)
    data = rng.standard_normal((1, 1, 2, 4))
    pool = SuperpixelPool(aggregator="max")
    vecs = pool.forward(FeatureMap(data), graph)
    dmap = pool.backward(np.ones_like(vecs))
    assert np.count_nonzero(dmap) == len(graph)
    for node in graph.nodes:
        vals = [data[0, 0, r, c] for r, c in node.pixel_indices]
        assert np.isclose(vecs[node.id, 0], max(vals))


def test_appearance_feature_shapes():
    rng = np.random.default_rng(10)
    img = rng.random((6, 6, 3))
    graph = oversegment(img, 4, method="grid", with_similarities=False)
    feats = appearance_features(img, graph)
    assert feats["color"].shape == (4, 3)
    assert feats["hist"].shape == (4, 24)
    assert feats["lbp"].shape == (4, 59)
    assert np.allclose(feats["hist"].sum(axis=1), 1.0)
    assert np.allclose(feats["lbp"].sum(axis=1), 1.0)


def test_graph_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    img = rng.random((6, 6, 3))
    graph = oversegment(img, 4, method="grid", gamma=1.0)
    path = tmp_path / "graph.txt"
    save_graph(path, graph)
    loaded = load_graph(path)
    assert len(loaded) == len(graph)
    assert np.allclose(loaded.centroids(), graph.centroids())
    assert [n.size for n in loaded.nodes] == [n.size for n in graph.nodes]
    assert len(loaded.edges) == len(graph.edges)
    for (p, q, s), (lp, lq, ls) in zip(graph.edges, loaded.edges):
        assert (p, q) == (lp, lq)
        assert np.array_equal(s, ls)  # repr round-trips floats exactly


def test_graph_dump_bad_line(tmp_path):
    path = tmp_path / "graph.txt"
    path.write_text("0 1.0 1.0 4\n1 2 3\n")
    with pytest.raises(ParseError):
        load_graph(path)
