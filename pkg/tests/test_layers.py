import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import check_function, check_params
from lipcheck import random_pair_ratios
from zoo import ZOO, make_layer
from lipshift import tensor as T
from lipshift.exceptions import ConfigError, DimensionError
from lipshift.layers import (
    AvgPool,
    CenterNorm,
    Drop,
    LiResConv,
    LLNHead,
    MaxMin,
    PatchEmbed,
    Shift,
    layer_operator,
)
from lipshift.spectral import materialize, power_iteration, svd_oracle
from lipshift.tensor import Tensor


@pytest.fixture(autouse=True)
def f64():
    with T.default_dtype(np.float64):
        yield


def fwd(layer, x, training=False, seed=0):
    return layer.forward(Tensor(x), training, np.random.default_rng(seed)).data


def set_param(p, value):
    arr = np.asarray(value, dtype=p.dtype)
    arr.flags.writeable = False
    p.data = arr


# ---------------------------------------------------------------- CenterNorm


def test_centernorm_examples():
    cn = CenterNorm(3)
    np.testing.assert_allclose(fwd(cn, np.full((1, 3), 4.2)), np.zeros((1, 3)), atol=1e-12)
    np.testing.assert_allclose(fwd(cn, np.array([[1.0, 2.0, 3.0]])), [[-1.0, 0.0, 1.0]])
    with pytest.raises(DimensionError):
        cn.forward(Tensor(np.zeros((1, 4))))


def test_centernorm_channel_axis_and_bound():
    cn = CenterNorm(4, axis=1)
    set_param(cn.gamma, [0.5, -2.0, 1.0, 1.5])
    x = np.random.default_rng(0).standard_normal((2, 4, 3, 3))
    out = fwd(cn, x)
    expected = (x - x.mean(axis=1, keepdims=True)) * cn.gamma.data.reshape(1, 4, 1, 1)
    np.testing.assert_allclose(out, expected)
    assert cn.lipschitz_bound() == 2.0


def test_centernorm_ratio_within_gamma_and_d_over_d_minus_one():
    d = 6
    cn = CenterNorm(d)
    ratios = random_pair_ratios(lambda t: cn.forward(t), (d,), n=10_000)
    assert ratios.max() <= 1.0 * (1 + 1e-4)
    assert ratios.max() <= d / (d - 1)


# ---------------------------------------------------------------- MaxMin


def test_maxmin_examples():
    mm = MaxMin()
    np.testing.assert_array_equal(fwd(mm, np.array([[1.0, 2.0]])), [[2.0, 1.0]])
    np.testing.assert_array_equal(fwd(mm, np.array([[5.0, 3.0]])), [[5.0, 3.0]])
    with pytest.raises(DimensionError):
        mm.forward(Tensor(np.zeros((1, 3))))
    assert mm.parameters() == {}


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 6), elements=st.floats(-5, 5)))
def test_maxmin_is_pairwise_sort(x):
    out = fwd(MaxMin(), x)
    pairs = x.reshape(2, 3, 2)
    np.testing.assert_array_equal(out.reshape(2, 3, 2)[..., 0], pairs.max(-1))
    np.testing.assert_array_equal(out.reshape(2, 3, 2)[..., 1], pairs.min(-1))


# ---------------------------------------------------------------- Shift


def test_shift_examples():
    assert np.array_equal(fwd(Shift(8, 0.0), np.arange(8 * 9.0).reshape(1, 8, 3, 3)), np.arange(8 * 9.0).reshape(1, 8, 3, 3))
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    shift = Shift(4, 0.25)
    full = np.concatenate([x] * 4, axis=1)
    out = fwd(shift, full)
    np.testing.assert_array_equal(out[0, 0], [[2.0, 0.0], [4.0, 0.0]])  # left
    np.testing.assert_array_equal(out[0, 1], [[0.0, 1.0], [0.0, 3.0]])  # right
    np.testing.assert_array_equal(out[0, 2], [[3.0, 4.0], [0.0, 0.0]])  # up
    np.testing.assert_array_equal(out[0, 3], [[0.0, 0.0], [1.0, 2.0]])  # down


def test_shift_rejects_bad_fraction():
    with pytest.raises(ConfigError):
        Shift(16, 1 / 12)
    with pytest.raises(ConfigError):
        Shift(8, 0.5)


def test_shift_operator_norm():
    # 144 x 144 exceeds the oracle guard; channels never mix, so the matrix is
    # block diagonal and its norm is the largest per-channel block norm
    m = materialize(layer_operator(Shift(4, 0.25, name="s"), (4, 6, 6)))
    blocks = [m[c * 36 : (c + 1) * 36, c * 36 : (c + 1) * 36] for c in range(4)]
    off = m.copy()
    for c in range(4):
        off[c * 36 : (c + 1) * 36, c * 36 : (c + 1) * 36] = 0.0
    assert not off.any()
    assert max(svd_oracle(b) for b in blocks) <= 1.0 + 1e-6


def test_shift_passthrough_channels():
    x = np.random.default_rng(0).standard_normal((1, 8, 3, 3))
    out = fwd(Shift(8, 0.125), x)
    np.testing.assert_array_equal(out[:, 4:], x[:, 4:])


# ---------------------------------------------------------------- LiResConv


def test_liresconv_zero_and_minus_identity():
    blk = LiResConv(4, init="zeros", name="z")
    set_param(blk.bias, [1.0, 2.0, 3.0, 4.0])
    x = np.random.default_rng(0).standard_normal((2, 4, 2, 2))
    np.testing.assert_allclose(fwd(blk, x), x + blk.bias.data.reshape(1, 4, 1, 1))
    assert blk.bound_estimate().value == pytest.approx(1.0)
    set_param(blk.weight, -np.eye(4))
    np.testing.assert_allclose(fwd(blk, x), np.broadcast_to(blk.bias.data.reshape(1, 4, 1, 1), x.shape))
    assert blk.bound_estimate().value == pytest.approx(0.0, abs=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_liresconv_bound_is_composite_sigma(seed):
    blk = LiResConv(8, seed=seed, init="residual", residual_scale=1.0, name=f"r{seed}")
    w = blk.weight.data
    est = blk.bound_estimate().value
    assert est == pytest.approx(svd_oracle(np.eye(8) + w), rel=1e-4)
    assert est <= 1 + svd_oracle(w) + 1e-9


def test_liresconv_composite_init_has_unit_bound():
    blk = LiResConv(16, seed=3, name="c")
    assert svd_oracle(blk.composite_matrix()) == pytest.approx(1.0, abs=1e-6)


def test_liresconv_channel_mismatch():
    with pytest.raises(DimensionError):
        LiResConv(4).forward(Tensor(np.zeros((1, 3, 2, 2))))


# ---------------------------------------------------------------- PatchEmbed


def test_patch_embed_identity():
    pe = PatchEmbed(3, 3, 1, name="p")
    set_param(pe.proj, np.eye(3))
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    np.testing.assert_allclose(fwd(pe, x), x)
    assert pe.bound_estimate().value == pytest.approx(1.0)


def test_patch_embed_init_bound_and_divisibility():
    pe = PatchEmbed(4, 8, 2, seed=5, name="p")
    assert pe.bound_estimate().value == pytest.approx(1.0, abs=1e-4)
    with pytest.raises(DimensionError):
        pe.forward(Tensor(np.zeros((1, 4, 3, 4))))


def test_patch_embed_materialized_matches_matrix():
    pe = PatchEmbed(2, 3, 2, seed=1, name="p")
    set_param(pe.proj, np.random.default_rng(2).standard_normal((8, 3)))
    full = svd_oracle(materialize(layer_operator(pe, (2, 4, 4))))
    assert full == pytest.approx(svd_oracle(pe.proj.data), rel=1e-4)
    assert pe.bound_estimate().value == pytest.approx(full, rel=1e-4)


def test_patch_embed_layout():
    pe = PatchEmbed(1, 4, 2, name="p")
    set_param(pe.proj, np.eye(4))
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = fwd(pe, x)
    np.testing.assert_array_equal(out[0, :, 0, 0], [0.0, 1.0, 4.0, 5.0])
    np.testing.assert_array_equal(out[0, :, 1, 1], [10.0, 11.0, 14.0, 15.0])


# ---------------------------------------------------------------- AvgPool


def test_avgpool_examples():
    x = np.random.default_rng(0).standard_normal((1, 2, 4, 4))
    np.testing.assert_array_equal(fwd(AvgPool(1), x), x)
    assert AvgPool(1).bound_estimate((2, 4, 4)).value == pytest.approx(1.0)
    assert AvgPool(2, name="a").bound_estimate((1, 2, 2)).value == pytest.approx(0.5, abs=1e-5)
    assert AvgPool(global_pool=True, name="g").bound_estimate((1, 8, 8)).value == pytest.approx(0.125, abs=1e-5)
    np.testing.assert_allclose(fwd(AvgPool(global_pool=True), x)[..., 0, 0], x.mean(axis=(2, 3)))
    with pytest.raises(DimensionError):
        AvgPool(3).forward(Tensor(x))


@pytest.mark.parametrize("kernel,shape", [(2, (3, 4, 4)), (4, (2, 8, 8)), (None, (2, 4, 6))])
def test_avgpool_closed_form_matches_power_iteration(kernel, shape):
    pool = AvgPool(global_pool=True, name="g") if kernel is None else AvgPool(kernel, name="p")
    iterated = power_iteration(pool.operator(shape), 3000, 1e-10).value
    assert pool.lipschitz_bound(shape) == pytest.approx(iterated, rel=1e-6)


# ---------------------------------------------------------------- LLN head


def test_lln_examples():
    head = LLNHead(3, 3, name="h")
    set_param(head.weight, np.eye(3))
    np.testing.assert_array_equal(head.normalized_weight().data, np.eye(3))
    set_param(head.weight, [[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    k = head.pair_constants()
    assert k[0, 1] == pytest.approx(0.0)
    assert k[0, 2] == pytest.approx(2.0)
    np.testing.assert_allclose(k, k.T)
    np.testing.assert_array_equal(np.diag(k), 0.0)


def test_lln_rows_unit_after_forward():
    head = LLNHead(8, 5, seed=2, name="h")
    head.forward(Tensor(np.ones((2, 8))))
    norms = np.linalg.norm(head.normalized_weight().data, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-6)
    assert np.all(head.pair_constants() <= 2.0 + 1e-12)


def test_lln_zero_row_warns():
    head = LLNHead(3, 2, name="h")
    set_param(head.weight, [[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])
    with pytest.warns(RuntimeWarning, match="zero norm"):
        w = head.normalized_weight().data
    np.testing.assert_array_equal(w[0], 0.0)
    np.testing.assert_allclose(w[1], [0.6, 0.8, 0.0])


def test_lln_pair_constant_tensor_matches():
    head = LLNHead(6, 4, seed=1, name="h")
    np.testing.assert_allclose(head.pair_constants_tensor().data, head.pair_constants(), atol=1e-6)


# ---------------------------------------------------------------- Drop


def test_drop_identity_cases():
    x = np.random.default_rng(0).standard_normal((4, 3))
    for mode in ("dropout", "droppath"):
        np.testing.assert_array_equal(fwd(Drop(0.0, mode), x, training=True), x)
        np.testing.assert_array_equal(fwd(Drop(0.7, mode), x, training=False), x)
    with pytest.raises(ConfigError):
        Drop(1.0)


@pytest.mark.parametrize("mode", ["dropout", "droppath"])
def test_drop_is_unbiased(mode):
    x = np.random.default_rng(0).uniform(0.5, 1.5, (10_000, 4))
    out = fwd(Drop(0.5, mode), x, training=True, seed=3)
    np.testing.assert_allclose(out.mean(axis=0), x.mean(axis=0), rtol=0.02)


def test_droppath_zeroes_whole_samples():
    x = np.ones((200, 3, 2, 2))
    out = fwd(Drop(0.5, "droppath"), x, training=True, seed=1)
    per_sample = out.reshape(200, -1)
    assert np.all((per_sample == 0).all(axis=1) | (per_sample == 2.0).all(axis=1))


def test_drop_is_seeded():
    x = np.ones((5, 5))
    assert np.array_equal(fwd(Drop(0.3), x, True, 4), fwd(Drop(0.3), x, True, 4))


# ---------------------------------------------------------------- gradients and bounds across the zoo




@pytest.mark.parametrize("name", ZOO)
def test_layer_gradients(name):
    layer = make_layer(name)
    shape = (2, 8, 4, 4)
    x = np.random.default_rng(0).uniform(-2, 2, shape)
    out_shape = layer.forward(Tensor(x), True, np.random.default_rng(1)).shape
    w = Tensor(np.random.default_rng(2).standard_normal(out_shape))

    def f(t):
        return T.tsum(T.mul(layer.forward(t, True, np.random.default_rng(1)), w))

    assert check_function(f, [x]) <= 1e-4
    if layer.parameters():
        err, where = check_params(lambda: f(Tensor(x)), layer.parameters())
        assert err <= 1e-4, where
