import json
import math

import numpy as np
import pytest
from sklearn.linear_model import LinearRegression, LogisticRegression

from conftest import ArrayDataset, toy_separable
from pvxplain.errors import DataError, DivergenceError, UsageError
from pvxplain.network import (
    Layer,
    LayerSpec,
    Network,
    TrainConfig,
    batch_loss_and_grads,
    build_loss_graph,
    build_network,
    evaluate_classifier,
    evaluate_regressor,
    exceedance_from_regression,
    load_network,
    network_from_dict,
    network_to_dict,
    predict,
    save_network,
    train,
)

HIDDEN = [LayerSpec(50), LayerSpec(30), LayerSpec(10)]


def test_parameter_count_three_hidden_layers():
    net = build_network(18, HIDDEN, head="sigmoid_classifier")
    # 18*50+50 + 50*30+30 + 30*10+10 + 10*1+1
    assert net.num_params() == 2801


def test_untrained_regressor_output_within_capacity():
    net = build_network(17, HIDDEN, head="capacity_scaled", capacity=2000.0, rng_seed=3)
    rng = np.random.default_rng(0)
    out = net.predict_batch(rng.normal(size=(64, 17)))
    assert np.all(out > 0.0) and np.all(out < 2000.0)


def test_same_seed_identical_weights():
    a = build_network(8, [LayerSpec(5), LayerSpec(3)], rng_seed=42)
    b = build_network(8, [LayerSpec(5), LayerSpec(3)], rng_seed=42)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weights, lb.weights)
        assert np.array_equal(la.bias, lb.bias)


def test_classifier_outputs_probabilities():
    net = build_network(6, [LayerSpec(4)], rng_seed=1)
    rng = np.random.default_rng(5)
    out = net.predict_batch(rng.normal(size=(32, 6)) * 10.0)
    assert np.all((out > 0.0) & (out < 1.0))


def test_zero_weight_classifier_predicts_half():
    net = build_network(4, [LayerSpec(3)], rng_seed=0)
    for layer in net.layers:
        layer.weights[:] = 0.0
        layer.bias[:] = 0.0
    assert predict(net, [1.0, -2.0, 0.5, 3.0]) == 0.5


def test_predict_validates_input():
    net = build_network(4, [LayerSpec(3)])
    with pytest.raises(DataError):
        predict(net, [1.0, 2.0])
    with pytest.raises(DataError):
        predict(net, [1.0, 2.0, float("nan"), 0.0])


def test_build_network_rejects_empty_hidden():
    with pytest.raises(UsageError):
        build_network(4, [])


def test_capacity_head_requires_capacity():
    with pytest.raises(UsageError):
        build_network(4, [LayerSpec(3)], head="capacity_scaled")


@pytest.mark.parametrize("head,capacity", [("sigmoid_classifier", None), ("capacity_scaled", 7.0)])
def test_head_bounds_hold_for_arbitrary_weights(head, capacity):
    upper = capacity if capacity else 1.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        net = build_network(5, [LayerSpec(6), LayerSpec(4)], head=head, capacity=capacity, rng_seed=seed)
        for layer in net.layers:
            layer.weights[:] = rng.normal(size=layer.weights.shape) * 0.5
            layer.bias[:] = rng.normal(size=layer.bias.shape) * 0.5
        out = net.predict_batch(rng.normal(size=(16, 5)))
        assert np.all(out > 0.0) and np.all(out < upper)
        # extreme weights saturate the sigmoid to the float boundary but
        # never leave [0, upper]
        for layer in net.layers:
            layer.weights[:] *= 1e6
        out = net.predict_batch(rng.normal(size=(16, 5)) * 20.0)
        assert np.all(out >= 0.0) and np.all(out <= upper)


def test_train_separable_toy_reaches_high_accuracy():
    data = toy_separable(200, seed=0)
    # oracle: plain logistic regression separates this set perfectly
    oracle = LogisticRegression(max_iter=2000).fit(data.features, data.targets)
    assert oracle.score(data.features, data.targets) == 1.0

    net = build_network(2, [LayerSpec(8), LayerSpec(4)], rng_seed=0)
    cfg = TrainConfig(loss="binary_cross_entropy", epochs=200, batch_size=32, rng_seed=0)
    trained, trace = train(net, data, cfg)
    metrics = evaluate_classifier(trained, data)
    assert metrics.accuracy >= 0.99
    # loss trend decreases overall
    assert trace[-1] < trace[0]


def test_train_regression_toy_close_to_noise_floor():
    rng = np.random.default_rng(1)
    x = rng.uniform(0.0, 1.0, size=800)
    y = np.clip(1000.0 * x, 0.0, 2000.0) + rng.normal(0.0, 10.0, size=800)
    data = ArrayDataset(x[:, None], y)
    # least-squares oracle: linear fit already sits near the noise floor
    oracle = LinearRegression().fit(data.features, data.targets)
    oracle_rmse = float(np.sqrt(np.mean((oracle.predict(data.features) - y) ** 2)))
    assert oracle_rmse < 15.0

    net = build_network(1, HIDDEN, head="capacity_scaled", capacity=2000.0, rng_seed=0)
    cfg = TrainConfig(loss="mse", epochs=300, batch_size=32, learning_rate=3e-3, rng_seed=0)
    trained, _ = train(net, data, cfg)
    assert evaluate_regressor(trained, data) <= 30.0


def test_zero_epochs_returns_unchanged_network():
    data = toy_separable(50, seed=2)
    net = build_network(2, [LayerSpec(4)], rng_seed=9)
    trained, trace = train(net, data, TrainConfig(epochs=0, batch_size=16))
    assert trace == []
    for before, after in zip(net.layers, trained.layers):
        assert np.array_equal(before.weights, after.weights)
        assert np.array_equal(before.bias, after.bias)


def test_zero_learning_rate_leaves_parameters_unchanged():
    data = toy_separable(64, seed=3)
    net = build_network(2, [LayerSpec(4)], rng_seed=5)
    trained, _ = train(net, data, TrainConfig(epochs=3, batch_size=16, learning_rate=0.0))
    for before, after in zip(net.layers, trained.layers):
        assert np.array_equal(before.weights, after.weights)


def test_training_is_deterministic():
    data = toy_separable(120, seed=4)
    cfg = TrainConfig(epochs=20, batch_size=16, rng_seed=7)
    runs = []
    for _ in range(2):
        net = build_network(2, [LayerSpec(6), LayerSpec(3)], rng_seed=7)
        runs.append(train(net, data, cfg))
    (net_a, trace_a), (net_b, trace_b) = runs
    assert trace_a == trace_b
    for la, lb in zip(net_a.layers, net_b.layers):
        assert np.array_equal(la.weights, lb.weights)
        assert np.array_equal(la.bias, lb.bias)


def test_divergent_training_raises_naming_epoch():
    # bounded heads keep the loss finite by construction; the unbounded
    # linear head overflows once the step size is absurd
    data = toy_separable(64, seed=5)
    y = data.features[:, 0] * 1000.0
    reg = ArrayDataset(data.features, y)
    net = build_network(2, [LayerSpec(8), LayerSpec(4)], head="linear")
    cfg = TrainConfig(loss="mse", epochs=5, batch_size=16, learning_rate=1e200)
    with pytest.raises(DivergenceError, match=r"divergence.*epoch \d+"):
        train(net, reg, cfg)


def test_bce_loss_finite_even_when_saturated():
    net = build_network(2, [LayerSpec(3)], rng_seed=0)
    for layer in net.layers:
        layer.weights[:] = 500.0
        layer.bias[:] = 0.0
    X = np.array([[10.0, 10.0], [-10.0, -10.0]])
    t = np.array([0.0, 1.0])  # worst case: confidently wrong
    value, grads = batch_loss_and_grads(net, X, t, "binary_cross_entropy")
    assert math.isfinite(value)
    assert all(np.all(np.isfinite(g)) for g in grads)


def test_loss_head_mismatch_rejected():
    data = toy_separable(40, seed=6)
    clf = build_network(2, [LayerSpec(3)])
    reg = build_network(2, [LayerSpec(3)], head="capacity_scaled", capacity=1.0)
    with pytest.raises(UsageError):
        train(reg, data, TrainConfig(loss="binary_cross_entropy", epochs=1, batch_size=8))
    with pytest.raises(UsageError):
        train(clf, data, TrainConfig(loss="mse", epochs=1, batch_size=8))


def test_batch_size_larger_than_dataset_rejected():
    data = toy_separable(10, seed=7)
    net = build_network(2, [LayerSpec(3)])
    with pytest.raises(UsageError):
        train(net, data, TrainConfig(epochs=1, batch_size=32))


@pytest.mark.parametrize("loss,head,capacity", [
    ("binary_cross_entropy", "sigmoid_classifier", None),
    ("mse", "capacity_scaled", 5.0),
    ("mse", "linear", None),
])
def test_parameter_gradients_match_graph_route(loss, head, capacity):
    # dual route: vectorized backprop vs adjoints on the scalar loss graph
    rng = np.random.default_rng(8)
    net = build_network(3, [LayerSpec(4), LayerSpec(3)], head=head, capacity=capacity, rng_seed=8)
    X = rng.normal(size=(6, 3))
    t = rng.integers(0, 2, size=6).astype(float) if loss == "binary_cross_entropy" else rng.normal(size=6)
    value, grads = batch_loss_and_grads(net, X, t, loss)

    g, param_idx, loss_node = build_loss_graph(net, X, t, loss)
    g.forward()
    assert g.nodes[loss_node].value == pytest.approx(value, rel=1e-12)
    adj = g.backward(loss_node)
    flat = iter(grads)
    for rows, bias in param_idx:
        w_grad = next(flat)
        b_grad = next(flat)
        graph_w = np.array([[adj[i] for i in row] for row in rows])
        graph_b = np.array([adj[i] for i in bias])
        np.testing.assert_allclose(w_grad, graph_w, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(b_grad, graph_b, rtol=1e-9, atol=1e-12)


def test_input_gradient_routes_agree():
    net = build_network(7, [LayerSpec(9), LayerSpec(5)], rng_seed=11)
    rng = np.random.default_rng(11)
    X = rng.normal(size=(5, 7))
    batch = net.input_gradients(X)
    for i in range(X.shape[0]):
        np.testing.assert_allclose(net.input_gradient(X[i]), batch[i], rtol=1e-10, atol=1e-14)


def test_evaluate_classifier_examples():
    net = build_network(1, [LayerSpec(2)], rng_seed=0)
    # force a monotone response: big positive weight path
    net.layers[0].weights[:] = np.array([[30.0], [30.0]])
    net.layers[0].bias[:] = 0.0
    net.layers[1].weights[:] = np.array([[1.0, 1.0]])
    net.layers[1].bias[:] = -15.0
    X = np.array([[1.0], [1.0], [-1.0], [-1.0]])
    t = np.array([1, 1, 0, 0])
    m = evaluate_classifier(net, ArrayDataset(X, t))
    assert m.accuracy == 1.0 and m.fp == 0 and m.fn == 0

    # constant 0.5 output: strict threshold classifies everything as 0
    zero = build_network(1, [LayerSpec(2)], rng_seed=0)
    for layer in zero.layers:
        layer.weights[:] = 0.0
        layer.bias[:] = 0.0
    m = evaluate_classifier(zero, ArrayDataset(X, t))
    assert m.tp == 0 and m.fp == 0 and m.tn == 2 and m.fn == 2


def test_evaluate_classifier_accuracy_fraction():
    net = build_network(1, [LayerSpec(2)], rng_seed=0)
    net.layers[0].weights[:] = np.array([[30.0], [30.0]])
    net.layers[0].bias[:] = 0.0
    net.layers[1].weights[:] = np.array([[1.0, 1.0]])
    net.layers[1].bias[:] = -15.0
    X = np.ones((10, 1))
    t = np.array([1] * 9 + [0])  # one mislabeled point
    assert evaluate_classifier(net, ArrayDataset(X, t)).accuracy == pytest.approx(0.9)


def test_evaluate_classifier_validates():
    net = build_network(1, [LayerSpec(2)])
    with pytest.raises(DataError):
        evaluate_classifier(net, ArrayDataset(np.empty((0, 1)), np.empty(0)))
    with pytest.raises(DataError):
        evaluate_classifier(net, ArrayDataset(np.ones((2, 1)), np.array([0.0, 0.5])))


def test_evaluate_regressor_examples():
    net = build_network(1, [LayerSpec(2)], head="linear", rng_seed=0)
    X = np.array([[1.0], [2.0]])

    class Fixed(Network):
        def predict_batch(self, X):  # noqa: D102 - test shim
            return self._fixed

    fixed = Fixed(net.layers, "linear", 1)
    fixed._fixed = np.array([5.0, 7.0])
    assert evaluate_regressor(fixed, ArrayDataset(X, np.array([5.0, 7.0]))) == 0.0
    assert evaluate_regressor(fixed, ArrayDataset(X, np.array([-5.0, -3.0]))) == pytest.approx(10.0)
    fixed._fixed = np.array([3.0, 4.0])
    assert evaluate_regressor(fixed, ArrayDataset(X, np.array([0.0, 0.0]))) == pytest.approx(
        math.sqrt(12.5)
    )
    with pytest.raises(DataError):
        evaluate_regressor(net, ArrayDataset(np.empty((0, 1)), np.empty(0)))


def test_exceedance_from_regression():
    assert exceedance_from_regression(1182.22, 400.0) == 1
    assert exceedance_from_regression(10.18, 810.0) == 0
    assert exceedance_from_regression(500.0, 500.0) == 0
    with pytest.raises(DataError):
        exceedance_from_regression(-1.0, 5.0)
    with pytest.raises(DataError):
        exceedance_from_regression(float("inf"), 5.0)


def test_persistence_round_trip_bit_exact(tmp_path):
    net = build_network(18, HIDDEN, head="capacity_scaled", capacity=2000.0, rng_seed=13)
    net.feature_names = [f"f{i}" for i in range(18)]
    net.normalization = {"f0": {"mean": 1.2345678901234567, "std": 0.9876543210987654}}
    path = tmp_path / "model.json"
    save_network(net, path)
    loaded = load_network(path)
    assert loaded.head == net.head and loaded.capacity == net.capacity
    assert loaded.feature_names == net.feature_names
    assert loaded.normalization == net.normalization
    for la, lb in zip(net.layers, loaded.layers):
        assert np.array_equal(la.weights, lb.weights)
        assert np.array_equal(la.bias, lb.bias)


def test_model_json_schema_keys(tmp_path):
    net = build_network(4, [LayerSpec(3)], rng_seed=0)
    doc = network_to_dict(net)
    assert {"schema_version", "input_width", "head", "layers", "feature_names"} <= set(doc)
    assert doc["head"] == {"kind": "sigmoid_classifier"}
    assert set(doc["layers"][0]) == {"activation", "weights", "bias"}
    # document round-trips through JSON text without float drift
    again = network_from_dict(json.loads(json.dumps(doc)))
    for la, lb in zip(net.layers, again.layers):
        assert np.array_equal(la.weights, lb.weights)


def test_load_network_rejects_bad_file(tmp_path):
    path = tmp_path / "junk.json"
    path.write_text("{not json")
    with pytest.raises(DataError):
        load_network(path)
