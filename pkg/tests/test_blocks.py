import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hartleyseg import blocks as B
from hartleyseg import transforms as T

from oracles import (circular_conv, dense_mha, layer_norm, low_pass_hartley, reference_block,
                     reference_layer, selu)

GRIDS = [(4, 4, 4), (6, 6, 6), (4, 6, 4), (6, 4, 6)]


def rel(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def _pair(z):
    return np.stack([z.real, z.imag])


def fourier_path(kappa, u):
    U = _pair(T.dft3(u, "none").data)
    R = _pair(T.dft3(kappa, "none").data)
    out = B.fourier_conv(U, R)
    return T.idft(out[0] + 1j * out[1], "none").real


def hartley_path(kappa, u):
    out = B.hartley_conv(T.dht3(u, "none").data, T.dht3(kappa, "none").data)
    return T.dht(out, "none", inverse=True)


def test_convolution_theorem_both_paths(rng):
    for i in range(20):
        dims = GRIDS[i % len(GRIDS)]
        kappa = rng.normal(size=(2, 3) + dims)
        u = rng.normal(size=(3,) + dims)
        ref = circular_conv(kappa, u)
        assert rel(hartley_path(kappa, u), ref) < 1e-5
        assert rel(fourier_path(kappa, u), ref) < 1e-5


def test_hartley_and_fourier_paths_agree(rng):
    kappa, u = rng.normal(size=(1, 1, 4, 6, 4)), rng.normal(size=(1, 4, 6, 4))
    np.testing.assert_allclose(hartley_path(kappa, u), fourier_path(kappa, u), atol=1e-10)


def test_even_kernel_collapses_to_pointwise(rng):
    R = rng.normal(size=(2, 3, 4, 4, 2))
    R = 0.5 * (R + B.reflect(R))
    U = rng.normal(size=(3, 4, 4, 2))
    np.testing.assert_allclose(B.hartley_conv(U, R), np.einsum("oixyz,ixyz->oxyz", R, U),
                               rtol=0, atol=1e-12)


def test_fourier_conv_trivial_weights(rng):
    U = rng.normal(size=(2, 3, 2, 2, 2))
    eye = np.zeros((2, 3, 3, 2, 2, 2))
    eye[0] = np.eye(3)[:, :, None, None, None]
    np.testing.assert_allclose(B.fourier_conv(U, eye), U)
    two = np.zeros((2, 1, 1, 2, 2, 2))
    two[0] = 2.0
    np.testing.assert_allclose(B.fourier_conv(U[:, :1], two), 2 * U[:, :1])
    with pytest.raises(ValueError, match="mismatch"):
        B.fourier_conv(U, eye[..., :1])


def test_hartley_shared_examples(rng):
    u = rng.normal(size=(3, 4, 6, 4))
    R = rng.normal(size=(2, 3))
    np.testing.assert_allclose(B.hartley_shared(u, np.eye(3)), u)
    full = T.idht3(T.SpectralField(B.hartley_shared(T.dht3(u).data, R), "full", T.GridSpec(u.shape[1:])))
    np.testing.assert_allclose(full, np.einsum("oi,ixyz->oxyz", R, u), atol=1e-6)
    k = (1, 2, 1)
    banded = T.truncate(T.dht3(u), k)
    out = T.idht3(T.pad(T.SpectralField(B.hartley_shared(banded.data, R), "banded", banded.grid)))
    np.testing.assert_allclose(out, np.einsum("oi,ixyz->oxyz", R, low_pass_hartley(u, k)), atol=1e-10)
    with pytest.raises(ValueError):
        B.hartley_shared(u, rng.normal(size=(2, 2)))


def test_patch_group_sizes_and_round_trip(rng):
    U = rng.normal(size=(4, 4, 4, 4))  # k_max = (2, 2, 2), d = 4
    tokens = B.patch_group(U)
    assert tokens.shape == (8, 32)
    np.testing.assert_array_equal(B.patch_ungroup(tokens, (4, 4, 4)), U)
    # a token holds one 2x2x2 cell of every channel, channel fastest
    np.testing.assert_array_equal(tokens[0].reshape(8, 4)[:, 0], U[0, :2, :2, :2].ravel())
    with pytest.raises(ValueError, match="even"):
        B.patch_group(rng.normal(size=(1, 3, 2, 2)))


def test_attention_economy_at_reference_band():
    sizes = B.attention_sizes((14, 14, 10), 12)
    assert sizes["n_f"] == 15680
    assert sizes["ungrouped_scores"] == 15680 ** 2 == 245_862_400
    assert sizes["tokens"] == 1960
    assert sizes["ungrouped_scores"] == 64 * sizes["grouped_scores"]
    assert B.attention_sizes((2, 2, 2), 4)["tokens"] == 8


def _mha_weights(rng, d=4, heads=2):
    return [rng.normal(size=(heads, d, d)) for _ in range(3)] + [rng.normal(size=(d, heads * d))]


def test_mha_zero_value_or_query(rng):
    U = rng.normal(size=(4, 4, 4, 4))
    Rq, Rk, Rv, Ro = _mha_weights(rng)
    np.testing.assert_array_equal(B.hartley_mha(U, Rq, Rk, 0 * Rv, Ro), 0.0)
    np.testing.assert_array_equal(B.hartley_mha(U, 0 * Rq, Rk, Rv, Ro), 0.0)


def test_mha_matches_dense_reference(rng):
    U = rng.normal(size=(4, 4, 4, 4))
    w = _mha_weights(rng)
    np.testing.assert_allclose(B.hartley_mha(U, *w), dense_mha(U, *w), rtol=0, atol=1e-6)


def test_mha_token_permutation(rng):
    U = rng.normal(size=(4, 4, 4, 4))
    w = _mha_weights(rng)
    perm = rng.permutation(8)
    np.testing.assert_allclose(B.hartley_mha(U, *w, token_order=perm), B.hartley_mha(U, *w),
                               rtol=0, atol=1e-12)


def test_mha_shape_checks(rng):
    U = rng.normal(size=(4, 4, 4, 4))
    Rq, Rk, Rv, Ro = _mha_weights(rng)
    with pytest.raises(ValueError, match="output mixing"):
        B.hartley_mha(U, Rq, Rk, Rv, Ro[:, :4])
    with pytest.raises(ValueError, match="channel"):
        B.hartley_mha(U[:3], Rq, Rk, Rv, Ro)


def test_selu_examples():
    assert B.selu(np.array(0.0)) == 0.0
    assert B.selu(np.array(1.0)) == pytest.approx(1.05070098)
    assert B.selu(np.array(-20.0)) == pytest.approx(-1.7580993, abs=1e-6)


def test_layer_norm_examples(rng):
    one, zero = np.ones(2), np.zeros(2)
    const = np.full((2, 3, 3, 3), 4.0)
    np.testing.assert_allclose(B.layer_norm(const, one, zero), 0.0, atol=1e-12)
    x = np.array([-1.0, 1.0]).reshape(2, 1, 1, 1)
    np.testing.assert_allclose(B.layer_norm(x, one, zero, eps=1e-12).ravel(), [-1, 1], atol=1e-9)
    y = rng.normal(size=(3, 2, 2, 2))
    g, b = rng.normal(size=3), rng.normal(size=3)
    np.testing.assert_allclose(B.layer_norm(y + 5.0, g, b), B.layer_norm(y, g, b), atol=1e-12)
    np.testing.assert_allclose(B.layer_norm(y, g, b), layer_norm(y, g, b), atol=1e-12)


# ---------------------------------------------------------------------------
# blocks


@pytest.mark.parametrize("kind", ["hno", "mha"])
def test_block_matches_straight_line_reference(kind, rng):
    k_max = (2, 1, 2)
    p = B.init_block(kind, 4, k_max, 2, rng)
    p = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in p.items()}  # non-trivial LN / biases
    u = rng.normal(size=(4, 6, 4, 4))
    fn = B.hno_block if kind == "hno" else B.hartley_mha_block
    np.testing.assert_allclose(fn(u, p, k_max), reference_block(u, p, kind, k_max), atol=1e-9)


def test_zero_parameters_zero_input(rng):
    p = {k: np.zeros_like(v) for k, v in B.init_block("hno", 3, (1, 1, 1), 1, rng).items()}
    np.testing.assert_array_equal(B.hno_block(np.zeros((3, 4, 4, 2)), p, (1, 1, 1)), 0.0)


@pytest.mark.parametrize("axis", [1, 2, 3])
def test_hno_block_shift_equivariance_full_band(axis, rng):
    k_max = (2, 3, 1)
    p = B.init_block("hno", 3, k_max, 1, rng)
    u = rng.normal(size=(3, 4, 6, 2))
    y = B.hno_block(u, p, k_max)
    np.testing.assert_allclose(B.hno_block(np.roll(u, 1, axis=axis), p, k_max),
                               np.roll(y, 1, axis=axis), atol=1e-6)


def test_mha_block_with_zero_attention_is_residual_plus_pointwise(rng):
    k_max = (1, 1, 1)
    p = B.init_block("mha", 4, k_max, 2, rng)
    for name in ("1.Rq", "1.Rk", "1.Rv"):
        p[name] = np.zeros_like(p[name])
    u = rng.normal(size=(4, 4, 4, 2))
    h = reference_layer(u, {k[2:]: v for k, v in p.items() if k.startswith("0.")}, "hartley_shared", k_max)
    z = np.einsum("oi,ixyz->oxyz", p["1.W"], h) + p["1.b"][:, None, None, None]
    expected = u + selu(layer_norm(z, p["1.gamma"], p["1.beta"]))
    np.testing.assert_allclose(B.hartley_mha_block(u, p, k_max), expected, atol=1e-10)


def test_block_width_mismatch(rng):
    p = B.init_block("hno", 3, (1, 1, 1), 1, rng)
    with pytest.raises(ValueError, match="equal input and output"):
        B.hno_block(rng.normal(size=(2, 4, 4, 4)), p, (1, 1, 1))


def test_effective_band_clamps_to_grid():
    assert B.effective_band((8, 4, 2), (3, 3, 3)) == (3, 2, 1)
    with pytest.raises(ValueError):
        B.effective_band((1, 4, 4), (1, 1, 1))


def test_per_frequency_weights_slice_to_sub_band(rng):
    # on a small grid the stored band is cut down to the matching frequencies
    k_max = (2, 2, 1)
    R = rng.normal(size=(1, 1, 4, 4, 2))
    sub = B._sub_band(R, k_max, (1, 2, 1))
    np.testing.assert_array_equal(sub, R[:, :, [0, 3]])


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_patch_round_trip_property(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 4)),) + tuple(2 * int(rng.integers(1, 4)) for _ in range(3))
    U = rng.normal(size=shape)
    np.testing.assert_array_equal(B.patch_ungroup(B.patch_group(U), shape[1:]), U)
