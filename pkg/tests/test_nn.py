import math
import struct
import time
import zlib

import numpy as np
import pytest

from depscreen.errors import ChecksumMismatch, CheckpointError, InvalidConfig, ShapeMismatch, VersionMismatch
from depscreen.nn import (
    EvalMode,
    Model,
    ModelConfig,
    TrainMode,
    build_model,
    forward,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
    set_frozen,
    sgd_step,
)
from depscreen.nn import layers as L
from depscreen.nn.checkpoint import dumps, loads

TOL = 1e-4


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar f w.r.t. array x (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        step = h * max(1.0, abs(x[i]))
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def small_config(**kw):
    base = dict(stage_blocks=[1, 1, 1], stage_channels=[3, 4, 5], input_size=16, arch_tag="tiny")
    base.update(kw)
    return ModelConfig(**base)


# -- per-layer finite differences ------------------------------------------------------


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.mark.parametrize("stride, pad, k", [(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 3)])
def test_conv_gradients(rng, stride, pad, k):
    x = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((4, 2, k, k))
    out, _ = L.conv2d_forward(x, w, stride, pad)
    proj = rng.standard_normal(out.shape)

    def f():
        return np.sum(L.conv2d_forward(x, w, stride, pad)[0] * proj)

    _, cache = L.conv2d_forward(x, w, stride, pad)
    dx, dw = L.conv2d_backward(proj, cache)
    assert rel_err(dx, numeric_grad(f, x)) <= TOL
    assert rel_err(dw, numeric_grad(f, w)) <= TOL


def test_conv_matches_direct_sum(rng):
    x = rng.standard_normal((2, 1, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out, _ = L.conv2d_forward(x, w, 1, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 1, 5, 5))
    for f in range(3):
        for i in range(5):
            for j in range(5):
                ref[f, 0, i, j] = np.sum(xp[:, 0, i:i + 3, j:j + 3] * w[f])
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("batch_stats", [True, False])
def test_batchnorm_gradients(rng, batch_stats):
    x = rng.standard_normal((3, 4, 3, 3)) * 2 + 1
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    proj = rng.standard_normal(x.shape)

    def f():
        return np.sum(L.batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), batch_stats, False)[0] * proj)

    _, cache = L.batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), batch_stats, False)
    dx, dg, db = L.batchnorm_backward(proj, cache)
    assert rel_err(dx, numeric_grad(f, x)) <= TOL
    assert rel_err(dg, numeric_grad(f, gamma)) <= TOL
    assert rel_err(db, numeric_grad(f, beta)) <= TOL


def test_batchnorm_running_update(rng):
    x = rng.standard_normal((2, 5, 2, 2)) + 3
    rm, rv = np.zeros(2), np.ones(2)
    L.batchnorm_forward(x, np.ones(2), np.zeros(2), rm, rv, True, True)
    m = 5 * 2 * 2
    mean = x.mean(axis=(1, 2, 3))
    var = x.var(axis=(1, 2, 3)) * m / (m - 1)
    np.testing.assert_allclose(rm, 0.1 * mean)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var)


def test_relu_gradients(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    proj = rng.standard_normal(x.shape)
    out, mask = L.relu_forward(x)
    assert rel_err(L.relu_backward(proj, mask), numeric_grad(lambda: np.sum(L.relu_forward(x)[0] * proj), x)) <= TOL


def test_maxpool_gradients(rng):
    x = rng.standard_normal((2, 2, 6, 6))
    proj = rng.standard_normal((2, 2, 3, 3))
    out, cache = L.maxpool2_forward(x)
    ref = x.reshape(2, 2, 3, 2, 3, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(out, ref)
    dx = L.maxpool2_backward(proj, cache)
    assert rel_err(dx, numeric_grad(lambda: np.sum(L.maxpool2_forward(x)[0] * proj), x)) <= TOL


def test_maxpool_odd_size_drops_edge(rng):
    x = rng.standard_normal((1, 1, 5, 5))
    out, cache = L.maxpool2_forward(x)
    assert out.shape == (1, 1, 2, 2)
    dx = L.maxpool2_backward(np.ones_like(out), cache)
    assert dx.shape == x.shape and not dx[..., 4, :].any() and not dx[..., :, 4].any()


def test_avgpool_gradients(rng):
    x = rng.standard_normal((3, 2, 4, 5))
    proj = rng.standard_normal((2, 3))
    out, shape = L.global_avgpool_forward(x)
    np.testing.assert_allclose(out, x.mean(axis=(2, 3)).T)
    dx = L.global_avgpool_backward(proj, shape)
    assert rel_err(dx, numeric_grad(lambda: np.sum(L.global_avgpool_forward(x)[0] * proj), x)) <= TOL


def test_linear_gradients(rng):
    x, w, b = rng.standard_normal((4, 3)), rng.standard_normal((2, 3)), rng.standard_normal(2)
    proj = rng.standard_normal((4, 2))

    def f():
        return np.sum(L.linear_forward(x, w, b)[0] * proj)

    dx, dw, db = L.linear_backward(proj, x, w)
    for analytic, var in ((dx, x), (dw, w), (db, b)):
        assert rel_err(analytic, numeric_grad(f, var)) <= TOL


def test_cross_entropy_gradients(rng):
    logits = rng.standard_normal((5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    _, d = L.cross_entropy(logits, labels)
    assert rel_err(d, numeric_grad(lambda: L.cross_entropy(logits, labels)[0], logits)) <= TOL


def test_uniform_logits_loss_is_ln2():
    loss, _ = L.cross_entropy(np.zeros((4, 2)), np.array([0, 1, 1, 0]))
    assert loss == pytest.approx(math.log(2))


def test_softmax_stable():
    p = L.softmax(np.array([[1000.0, 0.0], [-1000.0, -1000.0]]))
    np.testing.assert_allclose(p, [[1, 0], [0.5, 0.5]])


# -- whole-model gradient check ------------------------------------------------------


def _model_fd(model, x, y, names=None):
    loss, grads = model.loss_and_grads(x, y)
    names = names or sorted(grads)
    worst = 0.0
    for name in names:
        p = model.params[name]
        num = numeric_grad(lambda: model.loss_and_grads(x, y)[0], p)
        worst = max(worst, rel_err(grads[name], num))
    return worst, grads


def test_model_gradients_float64():
    t0 = time.perf_counter()
    model = Model(small_config(), seed=1, dtype=np.float64)
    rng = np.random.default_rng(2)
    x = rng.random((4, 3, 16, 16))
    y = np.array([0, 1, 1, 0])
    worst, grads = _model_fd(model, x, y)
    assert set(grads) == set(model.params)
    assert worst <= TOL
    assert time.perf_counter() - t0 < 120


def test_frozen_body_gradient_subset():
    model = Model(small_config(), seed=3, dtype=np.float64)
    model.set_frozen({0, 1})
    x = np.random.default_rng(4).random((3, 3, 16, 16))
    worst, grads = _model_fd(model, x, np.array([1, 0, 1]))
    assert set(grads) == {"head.weight", "head.bias"}
    assert worst <= TOL


def test_partially_frozen_gradients():
    model = Model(small_config(), seed=5, dtype=np.float64)
    model.set_frozen({0})
    x = np.random.default_rng(6).random((3, 3, 16, 16))
    worst, grads = _model_fd(model, x, np.array([1, 0, 1]))
    assert all(model.param_group[n] != 0 for n in grads)
    assert worst <= TOL


# -- structure ---------------------------------------------------------------------------


def expected_param_count(cfg):
    def cbn(ci, co, k):
        return ci * co * k * k + 2 * co

    total = cbn(cfg.in_channels, cfg.stage_channels[0], 3)
    c_prev = cfg.stage_channels[0]
    for s, (nb, c) in enumerate(zip(cfg.stage_blocks, cfg.stage_channels)):
        for b in range(nb):
            stride = 2 if b == 0 and s > 0 else 1
            total += cbn(c_prev, c, 3) + cbn(c, c, 3)
            if stride != 1 or c_prev != c:
                total += cbn(c_prev, c, 1)
            c_prev = c
    return total + c_prev * cfg.num_classes + cfg.num_classes


@pytest.mark.parametrize("arch", ["mini-10", "mini-18", "mini-34"])
def test_param_count(arch):
    cfg = ModelConfig.from_arch(arch)
    assert Model(cfg).param_count() == expected_param_count(cfg)


def test_default_param_count_value():
    assert build_model().param_count() == 174_738


def test_default_logits_shape():
    out = forward(build_model(), np.random.default_rng(0).random((1, 3, 224, 224)))
    assert out.shape == (1, 2)


def test_same_seed_same_params():
    a, b = Model(small_config(), seed=7), Model(small_config(), seed=7)
    assert a.digest() == b.digest()
    assert Model(small_config(), seed=8).digest() != a.digest()


def test_groups_partition():
    m = Model(ModelConfig.from_arch("mini-18"))
    assert set(m.param_group) == set(m.params)
    assert set(m.group_params(2)) == {"head.weight", "head.bias"}
    assert all(n.startswith(("stem", "stage1")) for n in m.group_params(0))
    assert all(n.startswith(("stage2", "stage3")) for n in m.group_params(1))


def test_zero_input_zero_logits():
    m = Model(small_config(), seed=0)
    out = m.forward(np.zeros((2, 3, 16, 16)), EvalMode)
    assert not np.any(out)


def test_eval_batch_independence():
    m = Model(small_config(), seed=0, dtype=np.float64)
    rng = np.random.default_rng(1)
    img = rng.random((1, 3, 16, 16))
    out = m.forward(np.repeat(img, 3, axis=0))
    assert np.all(out == out[0])
    x = rng.random((5, 3, 16, 16))
    perm = rng.permutation(5)
    np.testing.assert_allclose(m.forward(x)[perm], m.forward(x[perm]), atol=1e-12)


def test_train_mode_updates_only_unfrozen_running_stats():
    m = Model(small_config(), seed=0)
    m.set_frozen({0})
    before = {k: v.copy() for k, v in m.buffers.items()}
    m.forward(np.random.default_rng(0).random((4, 3, 16, 16)), TrainMode)
    for name, v in m.buffers.items():
        same = np.array_equal(v, before[name])
        assert same == (m.buffer_group[name] == 0), name


def test_shape_mismatch():
    m = Model(small_config())
    with pytest.raises(ShapeMismatch):
        m.forward(np.zeros((1, 3, 32, 32)))
    with pytest.raises(ShapeMismatch):
        m.loss_and_grads(np.zeros((2, 3, 16, 16)), np.array([0, 1, 1]))


@pytest.mark.parametrize(
    "kw", [dict(stage_blocks=[1, 1], stage_channels=[4, 4, 4]), dict(num_classes=1), dict(stage_blocks=[])]
)
def test_invalid_config(kw):
    with pytest.raises(InvalidConfig):
        Model(ModelConfig(**kw))


def test_unknown_arch():
    with pytest.raises(InvalidConfig):
        ModelConfig.from_arch("resnet-152")


def test_residual_identity():
    m = Model(small_config(), seed=0, dtype=np.float64)
    block = m.blocks[0]
    assert block.proj is None
    m.params["stage1.0.2.bn.weight"][:] = 0
    m.params["stage1.0.2.bn.bias"][:] = 0
    m.params["stage1.0.2.conv.weight"][:] = 0
    x = np.random.default_rng(0).random((3, 2, 4, 4))
    out, _ = block.forward(m, x, False)
    np.testing.assert_array_equal(out, x)


# -- optimizer / freeze ------------------------------------------------------------------


def test_sgd_zero_grad_no_change():
    m = Model(small_config())
    d = m.digest()
    m.sgd_step({k: np.zeros_like(v) for k, v in m.params.items()}, 0.1)
    assert m.digest() == d


def test_sgd_scalar_arithmetic():
    m = Model(small_config(), dtype=np.float64)
    m.params["head.bias"][:] = 1.0
    sgd_step(m, {"head.bias": np.full(2, 2.0)}, 0.1, momentum=0.0)
    np.testing.assert_allclose(m.params["head.bias"], 0.8)


def test_sgd_momentum_accumulates():
    m = Model(small_config(), dtype=np.float64)
    m.params["head.bias"][:] = 0.0
    g = {"head.bias": np.ones(2)}
    m.sgd_step(g, 0.1, momentum=0.9)
    m.sgd_step(g, 0.1, momentum=0.9)
    np.testing.assert_allclose(m.params["head.bias"], -(0.1 + 0.1 * 1.9))


@pytest.mark.parametrize("lr", [0.1, 1.0, 1.9])
def test_quadratic_step_decreases(lr):
    m = Model(small_config(), dtype=np.float64)
    w = m.params["head.bias"]
    w[:] = [1.5, -2.0]
    before = 0.5 * np.sum(w**2)
    m.sgd_step({"head.bias": w.copy()}, lr, momentum=0.0)
    assert 0.5 * np.sum(w**2) < before


def test_group_lr_scales():
    m = Model(small_config(), dtype=np.float64)
    name0 = m.group_params(0)[0]
    w0, wh = m.params[name0].copy(), m.params["head.bias"].copy()
    g = {name0: np.ones_like(w0), "head.bias": np.ones(2)}
    m.sgd_step(g, 1.0, group_lrs=[0.01, 0.1, 1.0], momentum=0)
    np.testing.assert_allclose(m.params[name0], w0 - 0.01)
    np.testing.assert_allclose(m.params["head.bias"], wh - 1.0)


def test_frozen_group_untouched_by_sgd():
    m = Model(small_config())
    m.set_frozen({0, 1})
    body = m.body_hash()
    x = np.random.default_rng(0).random((4, 3, 16, 16))
    for _ in range(3):
        _, g = loss_and_grads(m, x, np.array([0, 1, 0, 1]))
        m.sgd_step(g, 0.5)
    assert m.body_hash() == body


def test_freeze_unfreeze_flags_only():
    m = Model(small_config())
    d = m.digest()
    set_frozen(m, {0, 1, 2}, True)
    assert m.frozen_groups() == {0, 1, 2}
    set_frozen(m, {0, 1, 2}, False)
    assert m.frozen_groups() == set() and m.digest() == d
    _, g = m.loss_and_grads(np.random.default_rng(0).random((2, 3, 16, 16)), np.array([0, 1]))
    assert set(g) == set(m.params)
    with pytest.raises(ValueError):
        m.set_frozen({3})


def test_replace_head():
    m = Model(small_config(num_classes=4), seed=0)
    body = m.body_hash()
    m.replace_head(2, seed=1)
    assert m.params["head.weight"].shape == (2, 5)
    assert m.body_hash() == body
    assert m.forward(np.zeros((1, 3, 16, 16))).shape == (1, 2)


def test_snapshot_restore():
    m = Model(small_config())
    snap = m.snapshot()
    d = m.digest()
    x = np.random.default_rng(0).random((4, 3, 16, 16))
    _, g = m.loss_and_grads(x, np.array([0, 1, 0, 1]))
    m.sgd_step(g, 0.1)
    assert m.digest() != d
    m.restore(snap)
    assert m.digest() == d and m.velocity == {}


# -- checkpoint ---------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    m = Model(small_config(stage_channels=[2, 6, 3]), seed=4)
    m.set_frozen({0})
    m.set_lr_scales([0.01, 0.1, 1.0])
    m.forward(np.random.default_rng(1).random((4, 3, 16, 16)), TrainMode)
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.digest() == m.digest()
    assert back.config == m.config
    assert [(g.frozen, g.lr_scale) for g in back.groups] == [(g.frozen, g.lr_scale) for g in m.groups]
    x = np.random.default_rng(2).random((3, 3, 16, 16))
    np.testing.assert_array_equal(back.forward(x), m.forward(x))


def test_checkpoint_layout():
    blob = dumps(Model(small_config()))
    assert blob[:4] == b"DSCN"
    assert struct.unpack_from("<H", blob, 4)[0] == 1
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


def test_checkpoint_corrupt_byte():
    blob = bytearray(dumps(Model(small_config())))
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(ChecksumMismatch):
        loads(bytes(blob))


def test_checkpoint_bad_version():
    blob = bytearray(dumps(Model(small_config())))
    struct.pack_into("<H", blob, 4, 9)
    body = bytes(blob[:-4])
    with pytest.raises(VersionMismatch):
        loads(body + struct.pack("<I", zlib.crc32(body)))


def test_checkpoint_bad_magic_and_missing(tmp_path):
    with pytest.raises(CheckpointError):
        loads(b"NOPE" + b"\x00" * 20)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
