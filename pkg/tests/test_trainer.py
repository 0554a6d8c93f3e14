import json
import numpy as np
import pytest

from odemri.datagen import DataConfig, generate_dataset
from odemri.errors import CheckpointMismatchError, CorruptFileError, DivergenceError
from odemri.ode_net import NetworkConfig, init_params, regularized_mask
from odemri.tensor_core import ComplexImage
from odemri.trainer import (
    Adam,
    SGD,
    TrainConfig,
    epoch_permutation,
    load_checkpoint,
    loss,
    mse_loss,
    objective_and_grad,
    regularizer,
    sample_arrays,
    save_checkpoint,
    train,
)

from conftest import max_rel_err, numeric_grad, random_image

TINY_NET = NetworkConfig(num_blocks=2, feature_channels=4, augment_channels=1, steps=2)
TINY_DATA = DataConfig(n_train=4, n_test=2, height=16, width=16, coils=2, acs_size=4)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(TINY_DATA)


def tiny_config(**kw):
    base = dict(epochs=3, batch_size=2, network=TINY_NET)
    base.update(kw)
    return TrainConfig(**base)


# ---- loss / regularizer


def test_loss_examples(rng):
    x = random_image(rng, 5)
    assert loss(x, x) == 0.0
    assert loss(ComplexImage(np.ones((7, 3)), np.zeros((7, 3))), ComplexImage.zeros(7, 3)) == 0.5


def test_loss_gradient_finite_differences(rng):
    recon = rng.standard_normal((2, 2, 4, 4))
    truth = rng.standard_normal(recon.shape)
    _, g = mse_loss(recon, truth)
    # the loss is quadratic, so central differences are exact up to rounding
    num = numeric_grad(lambda: mse_loss(recon, truth)[0], recon, eps=1e-2)
    assert np.max(np.abs(g - num) / np.maximum(np.abs(g), 1e-6)) < 1e-8


def test_regularizer_examples(rng):
    params = {"w": np.array([3.0])}
    masks = {"w": np.ones(1)}
    assert regularizer(params, 0.0, masks)[0] == 0.0
    value, grads = regularizer(params, 0.1, masks)
    assert value == pytest.approx(0.9, abs=1e-15)
    assert grads["w"][0] == pytest.approx(0.6, abs=1e-15)


def test_regularizer_skips_biases_and_matches_fd(rng):
    cfg = TINY_NET
    params = init_params(cfg, rng)
    for k in params:
        params[k] = rng.standard_normal(params[k].shape)
    masks = regularized_mask(cfg)
    lam = 0.37
    value, grads = regularizer(params, lam, masks)
    assert not grads["lift.bias"].any() and not grads["project.bias"].any()
    layout = cfg.layout()
    assert not grads["blocks.0.theta0"][layout.slices["conv1.bias"]].any()
    assert np.all(grads["blocks.0.p"] == 2 * lam * params["blocks.0.p"])
    for k in ("lift.weight", "blocks.1.theta0", "blocks.1.p"):
        num = numeric_grad(lambda: regularizer(params, lam, masks)[0], params[k], eps=1e-2)
        assert np.max(np.abs(num - grads[k])) / np.max(np.abs(grads[k])) < 1e-10


def test_objective_gradient_finite_differences(tiny_data, rng):
    cfg = tiny_config(weight_decay=1e-2, network=NetworkConfig(num_blocks=2, feature_channels=3, augment_channels=1, steps=2, activation="tanh"))
    params = init_params(cfg.network, rng)
    params["blocks.0.p"] = np.array([0.3, -0.2])
    inputs, targets = sample_arrays(tiny_data.train[:2])
    _, _, grads = objective_and_grad(params, cfg, inputs, targets)
    for k in ("lift.weight", "blocks.0.p", "blocks.1.theta0", "project.bias"):
        num = numeric_grad(lambda: objective_and_grad(params, cfg, inputs, targets)[0], params[k])
        assert max_rel_err(grads[k], num, floor=1e-4) < 1e-6, k


# ---- optimizers


def test_adam_reference_recursion():
    opt = Adam(lr=0.1)
    p = {"x": np.array([1.0])}
    # g = 1, 1: m = 0.1, 0.19; v = 0.001, 0.001999; bias-corrected both are 1
    p1 = opt.step(p, {"x": np.array([1.0])})
    assert opt.m["x"][0] == pytest.approx(0.1, abs=1e-16)
    assert opt.v["x"][0] == pytest.approx(0.001, rel=1e-15)
    assert p1["x"][0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-15)
    p2 = opt.step(p1, {"x": np.array([1.0])})
    assert opt.m["x"][0] == pytest.approx(0.19, abs=1e-16)
    assert opt.v["x"][0] == pytest.approx(0.001999, rel=1e-15)
    assert p2["x"][0] == pytest.approx(1.0 - 0.2 / (1 + 1e-8), abs=1e-15)


def test_sgd_step():
    p = SGD(0.5).step({"x": np.array([1.0, 2.0])}, {"x": np.array([2.0, -2.0])})
    np.testing.assert_array_equal(p["x"], [0.0, 3.0])


def test_permutation_is_pure():
    a = epoch_permutation(3, 7, 20)
    assert np.array_equal(a, epoch_permutation(3, 7, 20))
    assert sorted(a) == list(range(20))
    assert not np.array_equal(a, epoch_permutation(3, 8, 20))


# ---- training


def test_zero_learning_rate_keeps_params(tiny_data):
    cfg = tiny_config(learning_rate=0.0)
    ck = train(cfg, tiny_data.train)
    init = init_params(cfg.network, np.random.default_rng([cfg.seed, 1]))
    for k in init:
        assert ck.params[k].tobytes() == init[k].tobytes()


def test_training_reduces_loss(tiny_data):
    ck = train(tiny_config(epochs=6), tiny_data.train, tiny_data.test)
    assert ck.history[-1]["train_loss"] <= ck.history[0]["train_loss"]
    assert len(ck.history) == 6 and ck.epoch == 6
    assert np.isfinite(ck.history[-1]["test_psnr_mean"])


def test_training_is_deterministic(tiny_data):
    a = train(tiny_config(), tiny_data.train, tiny_data.test)
    b = train(tiny_config(), tiny_data.train, tiny_data.test)
    assert a.equals(b)


def test_sgd_training_runs(tiny_data):
    ck = train(tiny_config(optimizer="sgd", learning_rate=1e-2), tiny_data.train)
    assert ck.optimizer_step == 6


def test_divergence_guard(tiny_data):
    with pytest.raises(DivergenceError):
        train(tiny_config(optimizer="sgd", learning_rate=1e200), tiny_data.train)


def test_log_and_checkpoint_files(tiny_data, tmp_path):
    train(tiny_config(), tiny_data.train, tiny_data.test, checkpoint_dir=tmp_path, log_path=tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,test_psnr_mean"
    assert len(lines) == 4
    assert load_checkpoint(tmp_path / "checkpoint.odec").epoch == 3


# ---- checkpoints


def test_checkpoint_bytes_stable(tiny_data, tmp_path):
    ck = train(tiny_config(), tiny_data.train)
    save_checkpoint(ck, tmp_path / "a.odec")
    back = load_checkpoint(tmp_path / "a.odec")
    save_checkpoint(back, tmp_path / "b.odec")
    assert (tmp_path / "a.odec").read_bytes() == (tmp_path / "b.odec").read_bytes()
    assert json.dumps(back.history, sort_keys=True) == json.dumps(ck.history, sort_keys=True)


def test_checkpoint_shape_mismatch(tiny_data, tmp_path):
    ck = train(tiny_config(epochs=1), tiny_data.train)
    save_checkpoint(ck, tmp_path / "a.odec")
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(tmp_path / "a.odec", NetworkConfig(num_blocks=2, feature_channels=5, augment_channels=1))
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(tmp_path / "a.odec", NetworkConfig(num_blocks=3, feature_channels=4, augment_channels=1))


def test_checkpoint_corrupt(tiny_data, tmp_path):
    ck = train(tiny_config(epochs=1), tiny_data.train)
    path = tmp_path / "a.odec"
    save_checkpoint(ck, path)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(CorruptFileError):
        load_checkpoint(path)
    path.write_bytes(data[:4] + (9).to_bytes(4, "little") + data[8:])
    with pytest.raises(CorruptFileError, match="version"):
        load_checkpoint(path)


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_resume_matches_straight_run(tiny_data, tmp_path, optimizer):
    lr = 1e-3 if optimizer == "adam" else 1e-2
    straight = train(tiny_config(epochs=4, optimizer=optimizer, learning_rate=lr), tiny_data.train, tiny_data.test)
    train(tiny_config(epochs=2, optimizer=optimizer, learning_rate=lr), tiny_data.train, tiny_data.test, checkpoint_dir=tmp_path)
    partial = load_checkpoint(tmp_path / "checkpoint.odec")
    resumed = train(tiny_config(epochs=4, optimizer=optimizer, learning_rate=lr), tiny_data.train, tiny_data.test, resume=partial)
    assert resumed.equals(straight)
