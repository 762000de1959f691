import numpy as np
import pytest

from mvsr.diffkern import (
    Adam,
    AdamState,
    ParameterStore,
    Tensor,
    adam_step,
    backward,
    channel_max_pool,
    check_gradients,
    conv1d,
    conv2d,
    group_norm,
    load_weights,
    mlp,
    save_weights,
    softmax,
)
from mvsr.diffkern import tensor as T
from mvsr.errors import BadGroupCount, CorruptFile, MissingGradient, ShapeMismatch, VersionMismatch

GRAD_TOL = 1e-5


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def store_params(store):
    return dict(store.items())


# ---------------------------------------------------------------- mlp


def test_mlp_zero_weights_gives_bias():
    store = ParameterStore()
    x = np.random.default_rng(0).normal(size=(5, 3))
    mlp(store, "m", x, [4])
    store.set("m/l0/w", np.zeros((3, 4)))
    store.set("m/l0/b", [1.0, 2.0, 3.0, 4.0])
    out = mlp(store, "m", x, [4]).data
    np.testing.assert_array_equal(out, np.tile([1.0, 2.0, 3.0, 4.0], (5, 1)))


def test_mlp_identity_layer():
    store = ParameterStore()
    x = np.random.default_rng(1).normal(size=(6, 3))
    store.set("m/l0/w", np.eye(3))
    store.set("m/l0/b", np.zeros(3))
    np.testing.assert_array_equal(mlp(store, "m", x, [3]).data, x)


def test_mlp_gradient_check():
    rng = np.random.default_rng(2)
    store = ParameterStore(seed=3)
    x = leaf(rng, 4, 5)
    mlp(store, "m", x, [6, 3])
    w = rng.normal(size=(4, 3))
    errs = check_gradients(lambda: T.tsum(T.mul(T.tabs(mlp(store, "m", x, [6, 3])), w)),
                           {**store_params(store), "x": x})
    assert max(errs.values()) < GRAD_TOL, errs


def test_mlp_shape_mismatch():
    store = ParameterStore()
    mlp(store, "m", np.zeros((2, 3)), [4])
    with pytest.raises(ShapeMismatch):
        mlp(store, "m", np.zeros((2, 5)), [4])
    with pytest.raises(ShapeMismatch):
        mlp(store, "m2", np.zeros((2, 3)), [])


# ---------------------------------------------------------------- conv


def test_conv2d_delta_kernel_identity():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 5, 6, 3))
    store = ParameterStore()
    k = np.zeros((3, 3, 3, 3))
    k[1, 1] = np.eye(3)
    store.set("c/w", k)
    store.set("c/b", np.zeros(3))
    np.testing.assert_array_equal(conv2d(store, "c", x, 3).data, x)


def test_conv2d_ones_kernel_on_constant():
    store = ParameterStore()
    store.set("c/w", np.ones((3, 3, 1, 1)))
    store.set("c/b", np.zeros(1))
    out = conv2d(store, "c", np.ones((1, 5, 5, 1)), 1).data[0, :, :, 0]
    assert np.all(out[1:-1, 1:-1] == 9.0)
    assert out[0, 0] == 4.0 and out[0, 2] == 6.0  # zero padding at borders
    rep = conv2d(store, "c", np.ones((1, 5, 5, 1)), 1, pad="replicate").data
    assert np.all(rep == 9.0)


def test_conv2d_output_extents_with_stride():
    store = ParameterStore()
    assert conv2d(store, "c", np.zeros((1, 8, 10, 2)), 4, stride=2).shape == (1, 4, 5, 4)
    assert conv2d(store, "d", np.zeros((2, 7, 9, 2)), 4, stride=2).shape == (2, 4, 5, 4)


def _conv2d_oracle(x, w, b, stride, pad_mode):
    mode = "edge" if pad_mode == "replicate" else "constant"
    xp = np.pad(x, [(0, 0), (1, 1), (1, 1), (0, 0)], mode=mode)
    bsz, h, wd, _ = x.shape
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((bsz, ho, wo, w.shape[-1]))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, i * stride:i * stride + 3, j * stride:j * stride + 3, :]
            out[:, i, j] = np.einsum("byxc,yxco->bo", patch, w) + b
    return out


@pytest.mark.parametrize("stride,pad", [(1, "zero"), (2, "zero"), (1, "replicate"), (2, "replicate")])
def test_conv2d_matches_direct_loop(stride, pad):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 6, 7, 3))
    store = ParameterStore(seed=1)
    out = conv2d(store, "c", x, 4, stride=stride, pad=pad).data
    want = _conv2d_oracle(x, store["c/w"].data, store["c/b"].data, stride, pad)
    np.testing.assert_allclose(out, want, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, "zero"), (2, "replicate")])
def test_conv2d_gradient_check(stride, pad):
    rng = np.random.default_rng(6)
    x = leaf(rng, 1, 5, 4, 2)
    store = ParameterStore(seed=2)
    f = lambda: T.tsum(T.mul(conv2d(store, "c", x, 3, stride=stride, pad=pad),
                             conv2d(store, "c", x, 3, stride=stride, pad=pad)))
    f()
    errs = check_gradients(f, {**store_params(store), "x": x})
    assert max(errs.values()) < GRAD_TOL, errs


def test_conv1d_delta_identity_and_edges():
    store = ParameterStore()
    k = np.zeros((3, 1, 1))
    k[1] = 1.0
    store.set("c/w", k)
    store.set("c/b", np.zeros(1))
    x = np.arange(5.0).reshape(1, 5, 1)
    np.testing.assert_array_equal(conv1d(store, "c", x, 1).data, x)
    store.set("c/w", np.ones((3, 1, 1)))
    out = conv1d(store, "c", np.ones((1, 5, 1)), 1).data.ravel()
    np.testing.assert_array_equal(out, [2, 3, 3, 3, 2])  # zero padding loses one tap at each end


def test_conv1d_gradient_check():
    rng = np.random.default_rng(7)
    x = leaf(rng, 2, 6, 3)
    store = ParameterStore(seed=3)
    f = lambda: T.tsum(T.mul(conv1d(store, "c", x, 4), conv1d(store, "c", x, 4)))
    f()
    errs = check_gradients(f, {**store_params(store), "x": x})
    assert max(errs.values()) < GRAD_TOL, errs


# ---------------------------------------------------------------- group norm


def test_group_norm_constant_input_is_zero():
    store = ParameterStore()
    out = group_norm(store, "g", np.full((1, 4, 8), 3.0)).data
    np.testing.assert_array_equal(out, 0.0)


def test_group_norm_statistics():
    rng = np.random.default_rng(8)
    x = rng.normal(3.0, 2.0, size=(3, 10, 16))
    out = group_norm(ParameterStore(), "g", x, groups=4).data.reshape(3, 10, 4, 4)
    assert np.abs(out.mean(axis=(1, 3))).max() < 1e-6
    assert np.abs(out.var(axis=(1, 3)) - 1).max() < 1e-3  # eps shifts var slightly


def test_group_norm_bad_groups():
    with pytest.raises(BadGroupCount):
        group_norm(ParameterStore(), "g", np.zeros((1, 3, 6)), groups=4)


def test_group_norm_gradient_check():
    rng = np.random.default_rng(9)
    x = leaf(rng, 2, 5, 8)
    store = ParameterStore()
    group_norm(store, "g", x, groups=2)
    store.set("g/gamma", rng.normal(size=8))
    store.set("g/beta", rng.normal(size=8))
    w = rng.normal(size=(2, 5, 8))
    f = lambda: T.tsum(T.mul(group_norm(store, "g", x, groups=2), w))
    errs = check_gradients(f, {**store_params(store), "x": x})
    assert max(errs.values()) < GRAD_TOL, errs


# ---------------------------------------------------------------- softmax / pooling


def test_softmax_cases():
    np.testing.assert_allclose(softmax(np.zeros(5)).data, np.full(5, 0.2), atol=1e-15)
    p = softmax(np.array([0.0, 100.0, 0.0])).data
    assert p[1] == 1.0 and p[0] < 1e-40 and abs(p.sum() - 1) < 1e-12
    x = np.random.default_rng(10).normal(size=7)
    np.testing.assert_allclose(softmax(x + 13.5).data, softmax(x).data, atol=1e-12)
    assert np.all(softmax(x).data > 0) and abs(softmax(x).data.sum() - 1) < 1e-12


def test_softmax_gradient_check():
    rng = np.random.default_rng(11)
    x = leaf(rng, 3, 7)
    w = rng.normal(size=(3, 7))
    errs = check_gradients(lambda: T.tsum(T.mul(softmax(x, axis=-1), w)), {"x": x})
    assert errs["x"] < GRAD_TOL


def test_channel_max_pool_cases():
    row = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(channel_max_pool(row).data, row[0])
    rows = np.random.default_rng(12).normal(size=(9, 4))
    perm = np.random.default_rng(13).permutation(9)
    np.testing.assert_array_equal(channel_max_pool(rows).data, channel_max_pool(rows[perm]).data)
    two = np.array([[1.0, 5.0], [2.0, -1.0]])
    np.testing.assert_array_equal(channel_max_pool(two).data, [2.0, 5.0])


def test_segment_max_gradient_check():
    rng = np.random.default_rng(14)
    x = leaf(rng, 10, 3)
    seg = np.array([0, 1, 0, 2, 1, 2, 2, 0, 1, 3])
    w = rng.normal(size=(4, 3))
    errs = check_gradients(lambda: T.tsum(T.mul(channel_max_pool(x, seg, 4), w)), {"x": x})
    assert errs["x"] < GRAD_TOL


# ---------------------------------------------------------------- misc ops


def test_elementwise_and_sparse_gradients():
    import scipy.sparse as sp

    rng = np.random.default_rng(15)
    a, b = leaf(rng, 4, 3), leaf(rng, 3)
    A = sp.random(5, 4, density=0.5, random_state=1, format="csr")
    idx = np.array([2, -1, 0, 3, 3])

    def f():
        y = T.div(T.sub(a, b), T.add(T.exp(b), 1.0))
        y = T.relu(y) + T.tabs(T.mul(y, 0.5))
        z = T.sparse_matmul(A, y) + T.gather_rows(y, idx)
        z = T.concat([z, T.pad(z, [(1, 0), (0, 0)], mode="replicate")[:5]], axis=1)
        return T.mean(T.mul(z, z))

    errs = check_gradients(f, {"a": a, "b": b})
    assert max(errs.values()) < GRAD_TOL, errs


def test_backward_accumulates_over_shared_nodes():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    z = y * y
    t = z * z
    backward(t)
    assert x.grad == 8 * 3.0 ** 7


# ---------------------------------------------------------------- adam


def test_adam_zero_gradient_leaves_params():
    store = ParameterStore(seed=1)
    mlp(store, "m", np.zeros((1, 2)), [3])
    before = store.copy()
    adam_step(store, {k: np.zeros_like(p.data) for k, p in store.items()}, lr=1e-3)
    assert store.equals(before)


def test_adam_single_step_closed_form():
    # f(x) = (x - 3)^2 at x = 1: g = -4; first Adam step moves by lr * g / (|g| + eps)
    store = ParameterStore()
    store.set("x", [1.0])
    lr, eps = 0.1, 1e-8
    g = 2 * (1.0 - 3.0)
    adam_step(store, {"x": np.array([g])}, lr=lr, eps=eps)
    m_hat, v_hat = g, g * g
    assert abs(store["x"].data[0] - (1.0 - lr * m_hat / (np.sqrt(v_hat) + eps))) < 1e-15


def test_adam_two_steps_closed_form():
    store = ParameterStore()
    store.set("x", [0.5])
    state = AdamState()
    b1, b2, lr, eps = 0.9, 0.999, 0.01, 1e-8
    x, m, v = 0.5, 0.0, 0.0
    for t in (1, 2):
        g = 2 * store["x"].data[0]
        adam_step(store, {"x": np.array([g])}, lr=lr, state=state)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    assert abs(store["x"].data[0] - x) < 1e-15


def test_adam_missing_gradient():
    store = ParameterStore()
    store.set("a", [1.0])
    store.set("b", [1.0])
    with pytest.raises(MissingGradient):
        adam_step(store, {"a": np.zeros(1)}, lr=1e-3)


def test_adam_runs_are_deterministic():
    def run():
        store = ParameterStore(seed=7)
        opt = Adam(store, lr=1e-2)
        x = np.random.default_rng(0).normal(size=(8, 3))
        for _ in range(5):
            store.zero_grad()
            backward(T.mean(T.mul(mlp(store, "m", x, [4, 1]), mlp(store, "m", x, [4, 1]))))
            opt.step()
        return store

    assert run().equals(run())


# ---------------------------------------------------------------- init / serialization


def test_init_is_path_keyed_and_bounded():
    a, b = ParameterStore(seed=5), ParameterStore(seed=5)
    a.get("x/w", (4, 6), fan_in=4, fan_out=6)
    a.get("y/w", (3, 3), fan_in=3, fan_out=3)
    b.get("y/w", (3, 3), fan_in=3, fan_out=3)
    b.get("x/w", (4, 6), fan_in=4, fan_out=6)
    assert a.equals(b)
    assert np.abs(a["x/w"].data).max() <= np.sqrt(6 / 10)
    c = ParameterStore(seed=6)
    c.get("x/w", (4, 6), fan_in=4, fan_out=6)
    assert not np.array_equal(c["x/w"].data, a["x/w"].data)


def _populated_store(dtype=np.float64):
    store = ParameterStore(seed=9, dtype=dtype)
    mlp(store, "net/pointnet", np.zeros((2, 35), dtype=dtype), [32, 32])
    conv2d(store, "net/smooth/c0", np.zeros((1, 4, 4, 4), dtype=dtype), 8)
    return store


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_weights_round_trip(tmp_path, dtype):
    store = _populated_store(dtype)
    save_weights(store, tmp_path / "w.bin")
    back = load_weights(tmp_path / "w.bin")
    assert back.equals(store)
    assert back.dtype == np.dtype(dtype)


def test_weights_truncated_is_corrupt(tmp_path):
    save_weights(_populated_store(), tmp_path / "w.bin")
    blob = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(blob[:-100])
    with pytest.raises(CorruptFile):
        load_weights(tmp_path / "t.bin")
    flipped = bytearray(blob)
    flipped[40] ^= 0xFF
    (tmp_path / "f.bin").write_bytes(bytes(flipped))
    with pytest.raises(CorruptFile):
        load_weights(tmp_path / "f.bin")


def test_weights_version_mismatch(tmp_path):
    save_weights(_populated_store(), tmp_path / "w.bin", version=99)
    with pytest.raises(VersionMismatch):
        load_weights(tmp_path / "w.bin")
