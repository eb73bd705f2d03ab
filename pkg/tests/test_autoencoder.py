import numpy as np
import pytest

from asd.autoencoder import (Architecture, AutoencoderModel, Dense, ModelError, TrainConfig, TrainingDiverged,
                             backward, forward, init_model, load_model, mse_loss, save_model, train)
from oracles import grads_agree, naive_forward, numeric_gradients


def identity_model(dim=4):
    """Linear model with forward(x) == x exactly: dim -> dim -> dim with identity weights."""
    eye = np.eye(dim)
    return AutoencoderModel([Dense(eye.copy(), np.zeros(dim)), Dense(eye.copy(), np.zeros(dim))])


def toy_model(seed, dims=(4, 3, 2, 3, 4)):
    model = init_model(Architecture(dims), seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    for layer in model.layers:
        layer.bias[:] = rng.normal(scale=0.1, size=layer.bias.shape)
    return model


def test_default_architecture():
    model = init_model(seed=0)
    assert model.dims == (640, 128, 128, 128, 128, 8, 128, 128, 128, 128, 640)
    assert [l.activation for l in model.layers] == ["relu"] * 9 + ["linear"]
    assert all(not l.bias.any() for l in model.layers)
    for layer in model.layers:
        fan_in, fan_out = layer.weight.shape
        assert np.abs(layer.weight).max() <= np.sqrt(6 / (fan_in + fan_out))


def test_init_deterministic():
    a, b = init_model(seed=7), init_model(seed=7)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.params(), b.params()))
    c = init_model(seed=8)
    assert a.params()[0].tobytes() != c.params()[0].tobytes()


def test_bad_descriptor():
    with pytest.raises(ModelError, match="output dim 641 != 640"):
        init_model("640-10-641")
    with pytest.raises(ModelError, match="input dim 10 != 640"):
        Architecture.parse("10-10-640")
    with pytest.raises(ModelError):
        Architecture.parse("640-x-640")


def test_zero_output_layer():
    model = init_model("640-32-640", seed=0)
    model.layers[-1].weight[:] = 0
    x = np.random.default_rng(0).normal(size=(5, 640))
    assert not forward(model, x).any()


def test_batch_of_one_matches_single():
    model = init_model(seed=1)
    x = np.random.default_rng(1).normal(size=640).astype(np.float32)
    assert forward(model, x).tobytes() == forward(model, x[None, :])[0].tobytes()


def test_batch_rows_match_single_calls():
    model = init_model(seed=2)
    x = np.random.default_rng(2).normal(size=(9, 640)).astype(np.float32)
    batch = forward(model, x)
    for i in range(9):
        np.testing.assert_array_equal(batch[i], forward(model, x[i]))


def test_forward_matches_naive_oracle():
    model = toy_model(3, dims=(6, 5, 3, 5, 6))
    x = np.random.default_rng(3).normal(size=(4, 6))
    np.testing.assert_allclose(forward(model, x), naive_forward(model, x), rtol=1e-6, atol=1e-12)


def test_forward_shape_error():
    with pytest.raises(ModelError):
        forward(init_model(seed=0), np.zeros((2, 639)))


def test_mse_loss_cases():
    assert mse_loss(np.ones((3, 5)), np.ones((3, 5))) == 0
    assert mse_loss(np.ones((7, 2)), np.zeros((7, 2))) == 1.0
    assert mse_loss(np.array([[1, 2], [3, 4]]), np.ones((2, 2))) == 3.5
    with pytest.raises(ModelError):
        mse_loss(np.ones(3), np.ones(4))


def test_gradients_vanish_at_exact_reconstruction():
    model = identity_model()
    x = np.random.default_rng(0).normal(size=(8, 4))
    loss, grads = backward(model, x)
    assert loss == 0
    assert all(not g.any() for g in grads)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    model = toy_model(seed)
    x = np.random.default_rng(seed).normal(size=(6, 4))
    _, grads = backward(model, x)
    assert grads_agree(grads, numeric_gradients(model, x))


def test_duplicated_batch_leaves_gradient_unchanged():
    model = toy_model(11)
    x = np.random.default_rng(11).normal(size=(5, 4))
    _, g1 = backward(model, x)
    _, g2 = backward(model, np.vstack([x, x]))
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_gradient_structure_mirrors_params():
    model = init_model(seed=0)
    _, grads = backward(model, np.random.default_rng(0).normal(size=(3, 640)))
    assert [g.shape for g in grads] == [p.shape for p in model.params()]
    assert all(np.isfinite(g).all() for g in grads)


def test_train_config_validation():
    with pytest.raises(ModelError):
        TrainConfig(epochs=0)
    with pytest.raises(ModelError):
        TrainConfig(batch_size=0)
    with pytest.raises(ModelError):
        TrainConfig(lr=0)


def _low_rank_data(rows=200, dim=640, seed=0):
    rng = np.random.default_rng(seed)
    basis = rng.normal(size=(4, dim))
    return (rng.normal(size=(rows, 4)) @ basis + 0.1 * rng.normal(size=(rows, dim))).astype(np.float32)


def test_training_reduces_loss():
    # observed: epoch-100 loss is ~0.4% of the epoch-1 loss on this data
    data = _low_rank_data()
    model, report = train(init_model("640-64-8-64-640", seed=0), data, TrainConfig(epochs=100, batch_size=32))
    assert len(report.epoch_losses) == 100
    assert report.final_loss < 0.5 * report.epoch_losses[0]
    assert all(np.isfinite(report.epoch_losses)) and min(report.epoch_losses) >= 0


def test_training_deterministic():
    data = _low_rank_data(rows=64)
    cfg = TrainConfig(epochs=3, batch_size=16, seed=5)
    a, _ = train(init_model("640-32-640", seed=1), data, cfg)
    b, _ = train(init_model("640-32-640", seed=1), data, cfg)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.params(), b.params()))


def test_training_does_not_mutate_input_model():
    model = init_model("640-16-640", seed=0)
    before = [p.copy() for p in model.params()]
    train(model, _low_rank_data(rows=32), TrainConfig(epochs=1, batch_size=8))
    assert all(np.array_equal(a, b) for a, b in zip(before, model.params()))


def test_epoch_loss_is_weighted_batch_mean():
    # one epoch with lr ~ 0: the reported loss must equal the full-set loss
    data = _low_rank_data(rows=50)
    model = init_model("640-16-640", seed=0, dtype=np.float64)
    full = mse_loss(data, forward(model, data))
    _, report = train(model, data, TrainConfig(epochs=1, batch_size=7, lr=1e-300, shuffle=False))
    assert report.epoch_losses[0] == pytest.approx(full, rel=1e-10)


def test_divergence_is_reported():
    data = np.full((4, 640), 1e30, dtype=np.float32)
    with pytest.raises(TrainingDiverged, match=r"non-finite loss at epoch \d+, batch \d+"):
        with np.errstate(all="ignore"):
            train(init_model("640-8-640", seed=0), data, TrainConfig(epochs=5, batch_size=2))


def test_train_requires_rows():
    with pytest.raises(ModelError):
        train(init_model(seed=0), np.zeros((0, 640), dtype=np.float32), TrainConfig(epochs=1))


def test_model_file_round_trip(tmp_path):
    model = init_model(seed=4)
    model.feature_fingerprint = "ab" * 32
    path = tmp_path / "m.asdm"
    save_model(path, model)
    raw = path.read_bytes()
    assert raw[:4] == b"ASDM"
    loaded = load_model(path)
    assert loaded.feature_fingerprint == "ab" * 32
    assert loaded.dims == model.dims
    assert all(a.tobytes() == b.tobytes() for a, b in zip(loaded.params(), model.params()))
    path.write_bytes(raw + b"\0")
    with pytest.raises(ModelError):
        load_model(path)
