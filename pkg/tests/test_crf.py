import copy

import numpy as np
import pytest
import scipy.integrate

from depthfuse.crf import (
    CrfInstance,
    DcnfDepthEstimator,
    DcnfSample,
    UnaryNet,
    centroid_log_depths,
    energy,
    log_partition,
    map_inference,
    nll,
    nll_grads,
    pairwise_weight,
    precision_matrix,
    train_dcnf,
)
from depthfuse.depth_io import DepthMap
from depthfuse.errors import ConstraintError, TrainingError
from depthfuse.netcore import LayerParams
from depthfuse.superpixel import Superpixel, SuperpixelGraph
from depthfuse.synthetic import generate_synthetic
from helpers import assert_grad_close, central_diff, rel_err


def make_graph(n, edges):
    nodes = [Superpixel(i, np.array([[0, i]]), (0.0, float(i))) for i in range(n)]
    return SuperpixelGraph(nodes=nodes, edges=edges, image_shape=(1, n))


def random_instance(rng, n, edge_prob=0.7, with_gt=True, beta_scale=1.0):
    edges = []
    for p in range(n):
        for q in range(p + 1, n):
            if rng.random() < edge_prob:
                edges.append((p, q, rng.uniform(0.05, 1.0, size=3)))
    return CrfInstance(
        graph=make_graph(n, edges),
        z=rng.uniform(-3, 3, size=n),
        beta=rng.uniform(0.0, beta_scale, size=3),
        y_gt=rng.uniform(-2, 2, size=n) if with_gt else None,
    )


# -- pairwise weights --------------------------------------------------------


def test_pairwise_weight_zero_beta():
    assert pairwise_weight([0.3, 0.9, 0.1], np.zeros(3)) == 0.0


def test_pairwise_weight_unit():
    assert pairwise_weight([1.0, 1.0, 1.0], np.ones(3)) == 3.0


def test_pairwise_weight_hand_value():
    assert np.isclose(pairwise_weight([1.0, 0.5, 0.25], [0.2, 0.3, 0.5]), 0.475, atol=1e-15)


def test_pairwise_weight_negative_beta():
    with pytest.raises(ConstraintError):
        pairwise_weight([1.0, 1.0, 1.0], [-0.1, 0.5, 0.5])


# -- energy ------------------------------------------------------------------


def test_energy_single_node():
    inst = CrfInstance(graph=make_graph(1, []), z=np.array([2.0]), beta=np.zeros(3))
    assert energy(inst, np.array([0.0])) == 4.0


def test_energy_two_node_hand_value():
    inst = CrfInstance(
        graph=make_graph(2, [(0, 1, np.array([1.0, 0.0, 0.0]))]),
        z=np.array([0.0, 2.0]),
        beta=np.array([1.0, 0.0, 0.0]),
    )
    assert np.isclose(energy(inst, np.array([0.5, 1.5])), 1.0, atol=1e-15)


def test_energy_constant_y_equals_z():
    inst = CrfInstance(
        graph=make_graph(3, [(0, 1, np.ones(3)), (1, 2, np.ones(3))]),
        z=np.full(3, 1.7),
        beta=np.ones(3),
    )
    assert energy(inst, inst.z) == 0.0


def test_energy_convexity():
    rng = np.random.default_rng(0)
    for _ in range(30):
        inst = random_instance(rng, 5)
        y1 = rng.standard_normal(5)
        y2 = rng.standard_normal(5)
        mid = energy(inst, 0.5 * (y1 + y2))
        assert mid <= 0.5 * energy(inst, y1) + 0.5 * energy(inst, y2) + 1e-12


# -- MAP inference -----------------------------------------------------------


def test_map_no_edges_returns_unary():
    rng = np.random.default_rng(1)
    inst = CrfInstance(graph=make_graph(4, []), z=rng.standard_normal(4), beta=np.ones(3))
    sol = map_inference(inst)
    assert np.allclose(sol.y_star, inst.z, atol=1e-12)


def test_map_two_node_hand_solution():
    inst = CrfInstance(
        graph=make_graph(2, [(0, 1, np.array([1.0, 0.0, 0.0]))]),
        z=np.array([0.0, 2.0]),
        beta=np.array([1.0, 0.0, 0.0]),
    )
    sol = map_inference(inst)
    assert np.allclose(sol.y_star, [0.5, 1.5], atol=1e-12)
    # cross-check by brute force on a fine grid around the solution
    grid = np.arange(-1.0, 3.0, 0.01)
    best = None
    for y1 in grid:
        e = (y1 - 0) ** 2 + (grid - 2) ** 2 + 0.5 * (y1 - grid) ** 2
        j = int(np.argmin(e))
        if best is None or e[j] < best[0]:
            best = (e[j], y1, grid[j])
    assert abs(best[1] - 0.5) <= 0.01 and abs(best[2] - 1.5) <= 0.01


def test_map_matches_dense_solve_oracle():
    rng = np.random.default_rng(2)
    for n in (3, 10, 50):
        inst = random_instance(rng, n, with_gt=False)
        sol = map_inference(inst)
        a = precision_matrix(inst)
        oracle = np.linalg.solve(a, inst.z)
        assert np.max(np.abs(sol.y_star - oracle)) <= 1e-10


def test_map_energy_is_minimal():
    rng = np.random.default_rng(3)
    inst = random_instance(rng, 6)
    sol = map_inference(inst)
    for _ in range(100):
        y = sol.y_star + rng.standard_normal(6) * rng.uniform(0.01, 2.0)
        assert energy(inst, y) >= sol.energy - 1e-12


def test_map_residual_invariant():
    rng = np.random.default_rng(4)
    for _ in range(10):
        inst = random_instance(rng, 8)
        sol = map_inference(inst)
        a = precision_matrix(inst)
        resid = np.max(np.abs(a @ sol.y_star - inst.z))
        assert resid <= 1e-8 * (1 + np.max(np.abs(inst.z)))


def test_negative_beta_rejected():
    with pytest.raises(ConstraintError):
        CrfInstance(graph=make_graph(2, []), z=np.zeros(2), beta=np.array([-1.0, 0, 0]))


# -- NLL and its gradients ---------------------------------------------------


def test_nll_single_node_quadrature():
    inst = CrfInstance(graph=make_graph(1, []), z=np.array([0.0]), beta=np.zeros(3),
                       y_gt=np.array([0.0]))
    value = nll(inst)
    assert np.isclose(value, 0.5 * np.log(np.pi), atol=1e-12)
    # independent quadrature of the normalizer: integral of exp(-y^2) = sqrt(pi)
    z_num, _ = scipy.integrate.quad(lambda y: np.exp(-(y**2)), -30, 30)
    assert np.isclose(value, np.log(z_num), atol=1e-9)


def test_partition_function_quadrature_two_nodes():
    inst = CrfInstance(
        graph=make_graph(2, [(0, 1, np.array([0.8, 0.5, 0.3]))]),
        z=np.array([0.4, -0.7]),
        beta=np.array([0.6, 0.2, 0.9]),
    )
    log_z = log_partition(inst)
    # exp(-E)/Z must integrate to 1
    num, _ = scipy.integrate.dblquad(
        lambda y2, y1: np.exp(-energy(inst, np.array([y1, y2])) - log_z),
        -12, 12, lambda _: -12, lambda _: 12, epsabs=1e-10, epsrel=1e-10,
    )
    assert abs(num - 1.0) < 1e-6


def test_nll_grad_z_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(5):
        inst = random_instance(rng, 5)
        dz, _ = nll_grads(inst)

        def f():
            return nll(inst)

        assert_grad_close(f, inst.z, dz, tol=1e-6, eps=1e-5)


def test_nll_grad_beta_finite_differences():
    rng = np.random.default_rng(6)
    for _ in range(5):
        inst = random_instance(rng, 5)
        inst.beta = inst.beta + 0.05  # keep beta - eps > 0 for central differences
        _, dbeta = nll_grads(inst)

        def f():
            return nll(inst)

        assert_grad_close(f, inst.beta, dbeta, tol=1e-6, eps=1e-5)


def test_nll_requires_ground_truth():
    inst = CrfInstance(graph=make_graph(2, []), z=np.zeros(2), beta=np.zeros(3))
    with pytest.raises(ConstraintError):
        nll(inst)
    with pytest.raises(ConstraintError):
        nll_grads(inst)


def test_smoothing_monotonicity_in_beta():
    rng = np.random.default_rng(7)
    for _ in range(5):
        inst = random_instance(rng, 8, with_gt=False)
        variances = []
        for scale in (0.0, 0.5, 1.0, 2.0, 4.0, 8.0):
            scaled = CrfInstance(graph=inst.graph, z=inst.z, beta=np.full(3, scale))
            variances.append(np.var(map_inference(scaled).y_star))
        assert all(a >= b - 1e-12 for a, b in zip(variances, variances[1:]))


# -- joint training ----------------------------------------------------------


def _tiny_samples(n_images=3, seed=0):
    scenes = generate_synthetic(n_images, 2, seed=seed, size=(12, 12))
    est = DcnfDepthEstimator(n_superpixels=6, segmentation="grid", gamma=1.0)
    samples = []
    for s in scenes:
        graph = est._segment(s.rgb)
        tensor = np.ascontiguousarray(s.rgb.transpose(2, 0, 1)[None])
        samples.append(DcnfSample(tensor, graph, centroid_log_depths(s.depth, graph)))
    return samples


def test_train_frozen_beta_matches_plain_regression():
    """With beta frozen at 0 the NLL decomposes into a least-squares loss plus
    (n/2) log pi, so training must follow the same trajectory as an
    independently written squared-error loop."""
    samples = _tiny_samples()
    rng = np.random.default_rng(1)
    net_a = UnaryNet(conv_channels=(4, 4, 6), hidden=8, rng=rng)
    net_b = copy.deepcopy(net_a)

    beta, history = train_dcnf(samples, net_a, np.zeros(3), epochs=3,
                               lr_schedule=1e-4, weight_decay=0.0, freeze_beta=True)
    assert np.array_equal(beta, np.zeros(3))

    from depthfuse.netcore import sgd_step

    sse_history = []
    for _ in range(3):
        total = 0.0
        for s in samples:
            z = net_b.forward(s.image, s.graph)
            total += float(np.sum((z - s.y_gt) ** 2)) + 0.5 * len(s.y_gt) * np.log(np.pi)
            net_b.backward(2.0 * (z - s.y_gt))
            sgd_step(net_b.params(), 1e-4, 0.0)
        sse_history.append(total / len(samples))
    assert np.allclose(history, sse_history, rtol=1e-12)


def test_train_reduces_nll_on_toy_set():
    scenes = generate_synthetic(20, 2, seed=3, size=(16, 16))
    est = DcnfDepthEstimator(n_superpixels=8, segmentation="grid", epochs=4,
                             lr=3e-4, seed=0)
    est.fit([s.rgb for s in scenes], [s.depth for s in scenes])
    assert est.history_[-1] < est.history_[0]


def test_composite_gradient_through_pool_and_convs():
    samples = _tiny_samples(n_images=1, seed=5)
    sample = samples[0]
    rng = np.random.default_rng(2)
    net = UnaryNet(conv_channels=(3, 3, 4), hidden=6, rng=rng)
    beta = np.array([0.4, 0.2, 0.1])

    def loss():
        z = net.forward(sample.image, sample.graph)
        return nll(CrfInstance(graph=sample.graph, z=z, beta=beta, y_gt=sample.y_gt))

    loss()
    dz, _ = nll_grads(
        CrfInstance(graph=sample.graph, z=net.forward(sample.image, sample.graph),
                    beta=beta, y_gt=sample.y_gt)
    )
    for p in net.params():
        p.zero_grads()
    net.forward(sample.image, sample.graph)
    net.backward(dz)
    conv1 = net.conv.layers[0].p
    sub = (slice(0, 2), slice(0, 2), slice(0, 2), slice(0, 2))
    numeric = central_diff(loss, conv1.weights[sub], eps=1e-5)
    assert rel_err(conv1.weight_grad[sub], numeric) <= 1e-4
    fc1 = net.head.layers[0].p
    numeric_b = central_diff(loss, fc1.bias, eps=1e-5)
    assert rel_err(fc1.bias_grad, numeric_b) <= 1e-4


class _DivergingUnary:
    """Minimal unary stand-in engineered so each SGD step multiplies its single
    weight by 2.2, driving a smooth NLL blow-up (tests the divergence abort,
    not the layer kit)."""

    def __init__(self):
        self.p = LayerParams(np.array([2.0]), np.zeros(1), name="w")

    def forward(self, image, graph):
        return np.array([self.p.weights[0]])

    def backward(self, dz):
        # with lr=1e-3 the update becomes w <- w + 1.2 w
        self.p.weight_grad += -600.0 * np.asarray(dz)

    def params(self):
        return [self.p]


def test_divergence_aborts_with_telemetry():
    graph = make_graph(1, [])
    sample = DcnfSample(np.zeros((1, 3, 2, 2)), graph, np.array([0.0]))
    with pytest.raises(TrainingError, match="consecutive"):
        train_dcnf([sample], _DivergingUnary(), np.zeros(3), epochs=30,
                   lr_schedule=lambda epoch: 1e-3, weight_decay=0.0, freeze_beta=True)


# -- prediction --------------------------------------------------------------


def test_predict_scatter_matches_map_inference():
    scenes = generate_synthetic(6, 2, seed=7, size=(16, 16))
    est = DcnfDepthEstimator(n_superpixels=8, segmentation="grid", epochs=2,
                             lr=3e-4, seed=1)
    est.fit([s.rgb for s in scenes], [s.depth for s in scenes])
    image = scenes[0].rgb
    z, graph = est.unary_depths(image)
    sol = map_inference(CrfInstance(graph=graph, z=z, beta=est.beta_))
    pred = est.predict(image, graph=graph)
    for node in graph.nodes:
        for r, c in node.pixel_indices:
            assert np.isclose(pred.values[r, c], np.exp(sol.y_star[node.id]))


def test_predict_no_edges_gives_unary_depths():
    scenes = generate_synthetic(4, 2, seed=9, size=(16, 16))
    est = DcnfDepthEstimator(n_superpixels=8, segmentation="grid", epochs=2,
                             lr=3e-4, seed=1)
    est.fit([s.rgb for s in scenes], [s.depth for s in scenes])
    est.beta_ = np.zeros(3)  # unary-only: A = I regardless of edges
    image = scenes[0].rgb
    z, graph = est.unary_depths(image)
    pred = est.predict(image, graph=graph)
    for node in graph.nodes:
        r, c = node.pixel_indices[0]
        assert np.isclose(pred.values[r, c], np.exp(z[node.id]), atol=1e-12)


def test_predict_constant_depth_world():
    rng = np.random.default_rng(11)
    images = [rng.random((12, 12, 3)) for _ in range(6)]
    flat = DepthMap(values=np.full((12, 12), 2.0))
    est = DcnfDepthEstimator(n_superpixels=6, segmentation="grid", epochs=6,
                             lr=1e-3, seed=0)
    est.fit(images, [flat] * 6)
    pred = est.predict(images[0])
    assert np.std(np.log(pred.values)) < 0.1
    assert abs(np.mean(np.log(pred.values)) - np.log(2.0)) < 0.2


def test_estimator_save_load_roundtrip(tmp_path):
    scenes = generate_synthetic(4, 2, seed=13, size=(16, 16))
    est = DcnfDepthEstimator(n_superpixels=8, segmentation="grid", epochs=2,
                             lr=3e-4, seed=2)
    est.fit([s.rgb for s in scenes], [s.depth for s in scenes])
    path = tmp_path / "model.bin"
    est.save(path)
    loaded = DcnfDepthEstimator.load(path)
    a = est.predict(scenes[0].rgb)
    b = loaded.predict(scenes[0].rgb)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(loaded.beta_, est.beta_)
