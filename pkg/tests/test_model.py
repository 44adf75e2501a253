import math

import numpy as np
import pytest

from ecg_beatnet import model, nn
from ecg_beatnet.dataset import DatasetSplit
from ecg_beatnet.errors import BadMagic, ConfigError, ConfigMismatch, CorruptPayload, EmptyTrainSet, ShapeMismatch, StaleCache, VersionMismatch
from ecg_beatnet.model import AdamHyper, CheckpointMeta, ModelConfig
from ecg_beatnet.wfdb import BeatClass

# 2*16*7+16 + 16*16*5+16 + 16*16*5+16 + 16*32*3+32 + 32*64+64 + 64*5+5
DEFAULT_PARAM_COUNT = 6837


def random_params(config=ModelConfig(), seed=0, dtype=np.float64):
    """Initialised weights plus non-zero biases and head, so every path carries signal."""
    params = model.init_model(config, dtype=dtype, zero_head=False)
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        if name.endswith(".bias"):
            p.value[...] = rng.normal(scale=0.1, size=p.shape)
    return params


# -- structure ---------------------------------------------------------------


def test_parameter_count():
    assert model.parameter_count(ModelConfig()) == DEFAULT_PARAM_COUNT
    assert sum(p.value.size for p in model.init_model(ModelConfig()).values()) == DEFAULT_PARAM_COUNT
    assert model.parameter_count(ModelConfig(in_channels=1)) == DEFAULT_PARAM_COUNT - 16 * 7


def test_layer_shapes():
    params = model.init_model(ModelConfig())
    assert params["conv1.weight"].shape == (16, 2, 7)
    assert params["conv2.weight"].shape == params["conv3.weight"].shape == (16, 16, 5)
    assert params["conv4.weight"].shape == (32, 16, 3)
    assert params["fc5.weight"].shape == (64, 32)
    assert params["fc6.weight"].shape == (5, 64)
    assert sum(1 for n in params if n.endswith(".weight")) == 6


@pytest.mark.parametrize("kwargs", [dict(window_len=100), dict(in_channels=0), dict(seed=-1)])
def test_model_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


# -- init --------------------------------------------------------------------


def test_init_deterministic():
    a = model.init_model(ModelConfig(seed=5))
    b = model.init_model(ModelConfig(seed=5))
    c = model.init_model(ModelConfig(seed=6))
    assert all(a[n].value.tobytes() == b[n].value.tobytes() for n in a)
    assert a["conv1.weight"].value.tobytes() != c["conv1.weight"].value.tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_init_std(seed):
    params = model.init_model(ModelConfig(seed=seed), zero_head=False)
    std = float(params["conv1.weight"].value.std())
    assert abs(std - math.sqrt(2 / 14)) <= 0.3 * math.sqrt(2 / 14)
    for name, p in params.items():
        if name.endswith(".bias"):
            assert not p.value.any()


def test_init_zero_head():
    params = model.init_model(ModelConfig())
    assert not params["fc6.weight"].value.any()
    # the other layers are unaffected by the head choice
    other = model.init_model(ModelConfig(), zero_head=False)
    assert params["fc5.weight"].value.tobytes() == other["fc5.weight"].value.tobytes()


# -- forward -----------------------------------------------------------------


def test_zero_input_gives_head_bias():
    params = model.init_model(ModelConfig(), zero_head=False)
    logits, _ = model.forward(params, np.zeros((2, 256), dtype=np.float32))
    np.testing.assert_array_equal(logits, params["fc6.bias"].value)
    assert not logits.any()


def test_shape_trace():
    params = model.init_model(ModelConfig())
    trace = model.shape_trace(params, np.zeros((2, 256), dtype=np.float32))
    assert trace == [(16, 256), (16, 128), (16, 128), (16, 64), (32, 64), (32, 32), (32,), (64,), (5,)]


def test_skip_isolation():
    params = random_params()
    for name in ("conv2", "conv3"):
        params[f"{name}.weight"].value[...] = 0
        params[f"{name}.bias"].value[...] = 0
    x = np.random.default_rng(0).normal(size=(2, 256))
    logits, _ = model.forward(params, x)

    v = {n: p.value for n, p in params.items()}
    h = nn.maxpool1d(nn.relu(nn.conv1d(x, v["conv1.weight"], v["conv1.bias"])[0])[0])[0]
    h = nn.maxpool1d(np.maximum(h, 0))[0]  # block output is ReLU(identity)
    h = nn.maxpool1d(nn.relu(nn.conv1d(h, v["conv4.weight"], v["conv4.bias"])[0])[0])[0]
    h = np.maximum(nn.dense(h.mean(axis=1), v["fc5.weight"], v["fc5.bias"])[0], 0)
    expect = nn.dense(h, v["fc6.weight"], v["fc6.bias"])[0]
    np.testing.assert_allclose(logits, expect, atol=1e-12)


def test_forward_shape_errors():
    params = model.init_model(ModelConfig())
    with pytest.raises(ShapeMismatch):
        model.forward(params, np.zeros((1, 256), dtype=np.float32))
    with pytest.raises(ShapeMismatch):
        model.forward(params, np.zeros((2, 100), dtype=np.float32))


# -- backward ----------------------------------------------------------------


def test_zero_dlogits_zero_grads():
    params = random_params()
    _, cache = model.forward(params, np.random.default_rng(0).normal(size=(2, 256)))
    model.backward(params, cache, np.zeros(5))
    assert all(not p.grad.any() for p in params.values())


def _model_loss_check(seed, coords=200):
    params = random_params(seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 256))
    target = int(rng.integers(5))

    def f():
        logits, _ = model.forward(params, x)
        return nn.softmax_xent(logits, target, 1.7)[0]

    model.zero_grads(params)
    logits, cache = model.forward(params, x)
    _, d = nn.softmax_xent(logits, target, 1.7)
    dx = model.backward(params, cache, d)
    names = list(params)
    inputs = [params[n].value for n in names] + [x]
    analytic = [params[n].grad for n in names] + [dx]
    return nn.grad_check(f, inputs, analytic, max_coords=coords, seed=seed)


@pytest.mark.parametrize("seed", range(2))
def test_full_model_gradcheck(seed):
    assert _model_loss_check(seed) <= 1e-4


def test_batching_equivalence():
    params = random_params()
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 2, 256))
    y = np.array([1, 4])
    w = np.array([0.5, 1, 1, 1, 2.0])
    acc = {n: np.zeros_like(p.value) for n, p in params.items()}
    for i in range(2):
        model.zero_grads(params)
        logits, cache = model.forward(params, x[i])
        _, d = nn.softmax_xent(logits, y[i], w[y[i]])
        model.backward(params, cache, d)
        for n, p in params.items():
            acc[n] += p.grad / 2
    model.zero_grads(params)
    model.batch_loss_and_grad(params, x, y, w[y])
    for n, p in params.items():
        np.testing.assert_allclose(p.grad, acc[n], atol=1e-7, rtol=0)


def test_stale_cache():
    params = model.init_model(ModelConfig())
    _, cache = model.forward(params, np.zeros((2, 256), dtype=np.float32))
    model.adam_step(params, AdamHyper(), 1)
    with pytest.raises(StaleCache):
        model.backward(params, cache, np.zeros(5, dtype=np.float32))


# -- adam --------------------------------------------------------------------


def test_adam_scalar_first_step():
    p = nn.Param(np.zeros(1))
    p.grad[...] = 1.0
    model.adam_step({"theta": p}, AdamHyper(lr=1e-3), 1)
    assert p.value[0] == pytest.approx(-1e-3, rel=1e-6)
    assert not p.grad.any()


def test_adam_zero_grad_no_change():
    params = model.init_model(ModelConfig())
    before = {n: p.value.copy() for n, p in params.items()}
    model.adam_step(params, AdamHyper(), 1)
    assert all(np.array_equal(before[n], p.value) for n, p in params.items())


def test_adam_state_finite():
    rng = np.random.default_rng(0)
    p = nn.Param(rng.normal(size=50))
    for t in range(1, 20):
        p.grad[...] = rng.normal(scale=10 ** rng.uniform(-6, 6), size=50)
        model.adam_step({"p": p}, AdamHyper(), t)
        assert np.all(np.isfinite(p.m)) and np.all(np.isfinite(p.v)) and np.all(p.v >= 0)


def test_adam_rejects_step_zero():
    with pytest.raises(ValueError):
        model.adam_step({}, AdamHyper(), 0)


# -- training ------------------------------------------------------------------


def _toy_set(n=40, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 5
    x = rng.normal(size=(n, 2, 64)).astype(np.float32)
    x[:, 0, 20:30] += labels[:, None] * 0.8  # learnable cue
    return x, labels


def test_training_deterministic():
    x, y = _toy_set()
    split = DatasetSplit(0, list(range(30)), list(range(30, 40)), [])
    cfg = ModelConfig(window_len=64, seed=3)
    hyper = AdamHyper(batch_size=8, epochs=3)
    a = model.train(x, y, split, cfg, hyper, np.ones(5))
    b = model.train(x, y, split, cfg, hyper, np.ones(5))
    assert a.history == b.history
    assert all(a.params[n].value.tobytes() == b.params[n].value.tobytes() for n in a.params)
    assert a.steps == 3 * 4  # 30 windows in batches of 8
    assert [h["epoch"] for h in a.history] == [1, 2, 3]


def test_training_lr_zero():
    x, y = _toy_set()
    split = DatasetSplit(0, list(range(30)), list(range(30, 40)), [])
    cfg = ModelConfig(window_len=64)
    res = model.train(x, y, split, cfg, AdamHyper(lr=0.0, epochs=2, batch_size=16), np.ones(5))
    init = model.init_model(cfg)
    assert all(np.array_equal(init[n].value, res.params[n].value) for n in init)


def test_training_first_loss_is_ln5():
    x, y = _toy_set()
    split = DatasetSplit(0, list(range(40)), [], [])
    seen = []
    model.train(x, y, split, ModelConfig(window_len=64), AdamHyper(lr=0.0, epochs=1, batch_size=40), np.ones(5), on_epoch=seen.append)
    assert abs(seen[0]["train_loss"] - math.log(5)) <= 0.05


def test_training_keeps_best_epoch():
    x, y = _toy_set(60)
    split = DatasetSplit(0, list(range(50)), list(range(50, 60)), [])
    res = model.train(x, y, split, ModelConfig(window_len=64), AdamHyper(epochs=6, batch_size=10), np.ones(5))
    best = max(h["val_accuracy"] for h in res.history)
    first_best = next(h["epoch"] for h in res.history if h["val_accuracy"] == best)
    assert res.best_epoch == first_best
    _, acc, _ = model.evaluate(res.params, x[50:], y[50:], np.ones(5))
    assert acc == best


def test_empty_train_set():
    x, y = _toy_set()
    with pytest.raises(EmptyTrainSet):
        model.train(x, y, DatasetSplit(0, [], [1], []), ModelConfig(window_len=64), AdamHyper(), np.ones(5))


# -- prediction -----------------------------------------------------------------


def test_predict_agrees_with_logits():
    params = random_params(dtype=np.float32)
    x = np.random.default_rng(0).normal(size=(1000, 2, 256)).astype(np.float32)
    probs = model.predict_proba(params, x, batch_size=128)
    logits, _ = model.forward(params, x)
    np.testing.assert_array_equal(probs.argmax(axis=1), logits.argmax(axis=1))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    cls, p = model.predict(params, x[7])
    assert cls == BeatClass(int(logits[7].argmax()))
    assert abs(p.sum() - 1) <= 1e-6


def test_predict_unique_max_and_ties():
    params = model.init_model(ModelConfig())  # zero head: logits are the head bias
    params["fc6.bias"].value[...] = [0, 1, 0, 3, 0]
    cls, _ = model.predict(params, np.zeros((2, 256), dtype=np.float32))
    assert cls == BeatClass.APC
    params["fc6.bias"].value[...] = [0, 0, 0, 0, 3]
    assert model.predict(params, np.zeros((2, 256), dtype=np.float32))[0] == BeatClass.PVC
    params["fc6.bias"].value[...] = [0, 2, 2, 0, 0]
    assert model.predict(params, np.zeros((2, 256), dtype=np.float32))[0] == BeatClass.LBBB


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(seed=11)
    params = random_params(cfg, dtype=np.float32)
    path = tmp_path / "m.ebnc"
    model.save_checkpoint(path, params, cfg, CheckpointMeta(epoch=4, seed=9, step=123))
    loaded, cfg2, meta = model.load_checkpoint(path, expected=ModelConfig())
    assert cfg2 == cfg
    assert meta == CheckpointMeta(epoch=4, seed=9, step=123)
    assert list(loaded) == list(params)
    for n in params:
        assert loaded[n].value.tobytes() == params[n].value.tobytes()
    assert path.read_bytes()[:6] == b"EBNC\x01\x00"


def test_checkpoint_truncated():
    blob = model.encode_checkpoint(model.init_model(ModelConfig()), ModelConfig())
    for cut in (len(blob) - 1, len(blob) // 2, 30):
        with pytest.raises(CorruptPayload):
            model.decode_checkpoint(blob[:cut])


def test_checkpoint_config_mismatch():
    cfg1 = ModelConfig(in_channels=1)
    blob = model.encode_checkpoint(model.init_model(cfg1), cfg1)
    with pytest.raises(ConfigMismatch):
        model.decode_checkpoint(blob, expected=ModelConfig(in_channels=2))
    model.decode_checkpoint(blob, expected=cfg1)


def test_checkpoint_bad_magic_and_version():
    blob = model.encode_checkpoint(model.init_model(ModelConfig()), ModelConfig())
    with pytest.raises(BadMagic):
        model.decode_checkpoint(b"NOPE" + blob[4:])
    with pytest.raises(VersionMismatch):
        model.decode_checkpoint(blob[:4] + b"\x02\x00" + blob[6:])


def test_checkpoint_wrong_parameter_table():
    params = model.init_model(ModelConfig())
    del params["fc6.bias"]
    blob = model.encode_checkpoint(params, ModelConfig())
    with pytest.raises(ConfigMismatch):
        model.decode_checkpoint(blob)


def test_activation_pattern():
    params = random_params()
    x = np.random.default_rng(0).normal(size=(2, 256))
    a = model.activation_pattern(params, x)
    assert a == model.activation_pattern(params, x.copy())
    assert a != model.activation_pattern(params, -x)
