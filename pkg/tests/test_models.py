import numpy as np
import pytest

from connectoscope import models as M
from connectoscope import tensor_engine as te
from connectoscope.classical_ml import compute_metrics, threshold_predictions
from connectoscope.connectome import RoiTimeSeries, flatten, pearson_matrix
from connectoscope.errors import BatchTooSmall, InputTooSmall, ShapeMismatch


def synthetic_connectomes(n, rois, seed, timesteps=40):
    rng = np.random.default_rng(seed)
    return np.stack(
        [flatten(pearson_matrix(RoiTimeSeries.from_raw(rng.normal(size=(timesteps, rois))))) for _ in range(n)]
    )


def separable(n, dim, seed):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.normal(size=(n, dim)) + 1.5 * (2 * y[:, None] - 1)
    return X, y


def ends_in_one_sigmoid(spec):
    last = spec.layers[-1]
    return last.kind == "dense" and last.size == 1 and last.activation == "sigmoid"


def test_vanilla_widths_and_param_count():
    spec = M.build_vanilla(0)
    assert spec.widths() == [9216, 213, 106, 53, 28, 1]
    assert ends_in_one_sigmoid(spec)
    assert all(l.dropout == 0.3 and l.activation == "relu" for l in spec.layers[:-1])
    net = M.Network(spec)
    assert net.param_count(0) == 9216 * 213 + 213 == 1_963_221
    p = net.predict_proba(np.random.default_rng(0).normal(size=(3, 9216)))
    assert p.shape == (3,) and np.all((p > 0) & (p < 1))


def test_sae_shape():
    spec = M.build_sae(0)
    assert spec.widths()[: spec.latent_index + 1] == [9216, 4096, 2048, 1024]
    assert spec.widths()[spec.latent_index :] == [1024, 2048, 4096, 9216]
    assert spec.output_shapes()[-1] == spec.input_shape
    assert all(l.activation == "selu" for l in spec.layers[:-1])
    assert spec.l1_coefficient == 0.001
    assert M.sae_widths(64) == ((28, 14), 7)


def test_sae_objective_matches_hand_assembly():
    spec = M.build_sae(3, input_dim=12)
    net = M.Network(spec)
    x = np.random.default_rng(1).normal(size=(2, 12))
    loss = M.eval_loss(net, x, None, l1=0.001)

    # layer-by-layer forward with plain numpy
    h, latent = x, None
    for i, layer in enumerate(spec.layers):
        h = h @ net.params[f"{i}.weight"].values + net.params[f"{i}.bias"].values
        if layer.activation == "selu":
            h = 1.0507009873554805 * np.where(h > 0, h, 1.6732632423543772 * (np.exp(np.minimum(h, 0)) - 1))
        if i + 1 == spec.latent_index:
            latent = h
    expected = np.mean((h - x) ** 2) + 0.001 * np.abs(latent).sum() / 2
    assert loss == pytest.approx(expected, abs=1e-12)


def test_latent_classifier_shape_and_eval_determinism():
    spec = M.build_latent_classifier(0)
    assert spec.widths() == [1024, 512, 128, 64, 32, 1]
    assert ends_in_one_sigmoid(spec)
    net = M.Network(spec)
    x = np.random.default_rng(2).normal(size=(5, 1024))
    out = net.forward(x).values
    assert out.shape == (5, 1)
    assert np.array_equal(out, net.forward(x).values)


def test_cnn_stage_shapes():
    spec = M.build_cnn3d(0)
    assert spec.stage_shapes() == [(59, 71, 59), (29, 35, 29), (27, 33, 27), (13, 16, 13), (11, 14, 11), (5, 7, 5)]
    assert spec.flatten_size() == 5 * 7 * 5 * 256 == 44800
    assert ends_in_one_sigmoid(spec)
    p = M.Network(spec).predict_proba(np.zeros((1, 1, 61, 73, 61)))
    assert 0 < p[0] < 1


def test_cnn_rejects_wrong_inputs():
    net = M.Network(M.build_cnn3d(0, input_shape=(16, 16, 16), filters=(2, 2), dense_units=4))
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((1, 1, 16, 16, 15)))
    with pytest.raises(ShapeMismatch):
        M.Network(M.build_cnn3d(0)).forward(np.zeros((1, 1, 61, 73, 60)))
    with pytest.raises(InputTooSmall):
        M.build_cnn3d(0, input_shape=(8, 8, 8)).output_shapes()


def test_spec_round_trips_through_dict():
    spec = M.build_cnn3d(4, input_shape=(16, 16, 16), filters=(8, 16), dense_units=32)
    assert M.ModelSpec.from_dict(spec.to_dict()) == spec


def test_toy_set_is_fitted_exactly():
    X = np.array([[1.0, 2.0], [-1.0, -1.5]])
    y = np.array([1, 0])
    for seed in range(5):
        spec = M.build_vanilla(seed, input_dim=2, hidden=(4,))
        assert spec.widths() == [2, 4, 1]
        r = M.train(spec, X, y, M.TrainConfig(epochs=200, learning_rate=1e-2, seed=seed))
        assert len(r.history) == 200
        assert M.evaluate(r.network, X, y).accuracy == 1.0


def test_same_seed_same_history():
    X, y = separable(20, 6, 0)
    spec = M.build_vanilla(1, input_dim=6, hidden=(8, 4))
    cfg = M.TrainConfig(epochs=5, batch_size=3, seed=9)
    a, b = M.train(spec, X, y, cfg), M.train(spec, X, y, cfg)
    assert a.history == b.history
    other = M.train(spec, X, y, M.TrainConfig(epochs=5, batch_size=3, seed=10))
    assert other.history != a.history


def test_cnn_training_with_augmentation_is_deterministic():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(6, 1, 8, 8, 8))
    y = np.array([0, 1, 0, 1, 0, 1])
    spec = M.build_cnn3d(0, input_shape=(8, 8, 8), filters=(2,), dense_units=4)
    cfg = M.TrainConfig(epochs=2, batch_size=4, augment=True, seed=2)
    a, b = M.train(spec, X, y, cfg), M.train(spec, X, y, cfg)
    assert a.history == b.history
    assert np.array_equal(a.network.state_dict()["2.running_mean"], b.network.state_dict()["2.running_mean"])


def test_batchnorm_needs_two_samples():
    spec = M.build_cnn3d(0, input_shape=(8, 8, 8), filters=(2,), dense_units=4)
    X = np.zeros((3, 1, 8, 8, 8))
    with pytest.raises(BatchTooSmall):
        M.train(spec, X, [0, 1, 0], M.TrainConfig(epochs=1, batch_size=1))
    # a trailing batch of one is folded into the previous batch
    batches = M._batches(np.arange(5), 2, 2)
    assert [b.tolist() for b in batches] == [[0, 1], [2, 3, 4]]
    assert [b.size for b in M._batches(np.arange(5), 2, 1)] == [2, 2, 1]


def test_train_rejects_mismatched_features():
    with pytest.raises(ShapeMismatch):
        M.train(M.build_vanilla(0, input_dim=4), np.zeros((3, 5)), [0, 1, 0], M.TrainConfig(epochs=1))


def test_sae_reconstruction_improves():
    X = synthetic_connectomes(20, 24, 0)
    r = M.train(M.build_sae(0, input_dim=576), X, None, M.TrainConfig(epochs=30, optimizer="sgd", learning_rate=0.1))
    windows = np.array(r.history).reshape(6, 5).mean(axis=1)
    assert r.history[-1] < r.history[0]
    assert np.all(np.diff(windows) < 0)


def test_classifier_loss_trend():
    X, y = separable(40, 10, 1)
    r = M.train(M.build_vanilla(0, input_dim=10, hidden=(16, 8)), X, y, M.TrainConfig(epochs=20))
    q = len(r.history) // 4
    assert np.mean(r.history[-q:]) < np.mean(r.history[:q])


def test_l1_penalty_sparsifies_latent():
    X = synthetic_connectomes(20, 24, 1)
    means = {}
    for l1 in (0.0, 0.001):
        r = M.train(
            M.build_sae(0, input_dim=576),
            X,
            None,
            M.TrainConfig(epochs=30, optimizer="sgd", learning_rate=0.1, l1_coefficient=l1),
        )
        means[l1] = np.abs(r.network.encode(X)).mean()
    assert means[0.001] < means[0.0]


def test_encoder_feeds_latent_classifier():
    X, y = separable(12, 36, 2)
    sae = M.build_sae(0, input_dim=36)
    clf = M.build_latent_classifier(0, latent_dim=4, hidden=(4,))
    cfg = M.TrainConfig(epochs=3, optimizer="sgd", learning_rate=0.1)
    model = M.fit_sae_classifier(X, y, sae, clf, cfg, M.TrainConfig(epochs=3))
    assert model.autoencoder.encode(X).shape == (12, 4)
    assert model.predict_proba(X).shape == (12,)
    tuned = M.fit_sae_classifier(X, y, sae, clf, cfg, M.TrainConfig(epochs=3), finetune_encoder=True)
    assert tuned.finetuned and tuned.predict_proba(X).shape == (12,)
    # full-size encoder emits the 1024-wide code the latent classifier expects
    full = M.build_sae(0)
    assert full.output_shapes()[full.latent_index - 1] == (1024,)
    assert M.build_latent_classifier(0).input_shape == (1024,)


def test_evaluate_threshold_and_fixture():
    net = M.Network(M.build_vanilla(0, input_dim=3, hidden=(2,)))
    for t in net.params.values():
        t.values[...] = 0.0
    # all-zero weights give p = 0.5 exactly, which counts as positive
    assert M.evaluate(net, np.ones((4, 3)), [1, 1, 0, 0]).tp == 2
    assert threshold_predictions(np.array([0.5, 0.4999]))[:].tolist() == [1, 0]

    preds = [1] * 10 + [0] * 1 + [0] * 6 + [1] * 5
    labels = [1] * 10 + [1] * 1 + [0] * 6 + [0] * 5
    r = compute_metrics(preds, labels)
    assert (r.tp, r.fn, r.tn, r.fp) == (10, 1, 6, 5)
    assert r.sensitivity == pytest.approx(10 / 11) and round(r.sensitivity, 3) == 0.909
    assert round(r.specificity, 3) == 0.545 and round(r.accuracy, 3) == 0.727


def test_perfect_predictions():
    X = np.array([[5.0, 5.0], [-5.0, -5.0], [5.0, 5.0], [-5.0, -5.0]])
    y = np.array([1, 0, 1, 0])
    net = M.Network(M.build_vanilla(0, input_dim=2, hidden=(2,)))
    net.params["0.weight"].values[...] = np.eye(2)
    net.params["1.weight"].values[...] = [[1.0], [1.0]]
    net.params["1.bias"].values[...] = -1.0
    assert M.evaluate(net, X, y).accuracy == 1.0


def test_checkpoint_restores_predictions(tmp_path):
    spec = M.build_cnn3d(5, input_shape=(8, 8, 8), filters=(2,), dense_units=4)
    X = np.random.default_rng(4).normal(size=(4, 1, 8, 8, 8))
    r = M.train(spec, X, [0, 1, 0, 1], M.TrainConfig(epochs=1, batch_size=4))
    te.save_checkpoint(tmp_path / "m.ckpt", r.network.state_dict())
    fresh = M.Network(spec)
    fresh.load_state_dict(te.load_checkpoint(tmp_path / "m.ckpt"))
    assert np.array_equal(fresh.predict_proba(X), r.network.predict_proba(X))
