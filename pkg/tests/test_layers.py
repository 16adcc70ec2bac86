import numpy as np
import pytest

from relaxconv.basis import solve_basis
from relaxconv.conv import conv2d, conv2d_backward, conv2d_reference
from relaxconv.errors import ConfigError, ShapeError
from relaxconv.evaluation import model_ee
from relaxconv.groups import CyclicGroup, act_array, rotate_grid
from relaxconv.layers import (ConvLayer, GroupConvLayer, LocallyConnectedLayer,
                              LowRankTranslationLayer, RelaxedGroupConvLayer,
                              RelaxedSteerableConvLayer, ReLU, SteerableConvLayer, angular_buckets,
                              relu, relu_backward)
from relaxconv.verify import LAYER_FAMILIES, fd_relative_error, layer_gradcheck, random_layer, reductions_suite

C4 = CyclicGroup(4)
RNG = np.random.default_rng


def _equiv_defect(layer, x, group=C4):
    return max(np.abs(layer(act_array(layer.rep_in, g, x)) - act_array(layer.rep_out, g, layer(x))).max()
               for g in group.elements())


# ------------------------------------------------------------------ conv core


def test_conv_matches_loop_oracle():
    rng = RNG(0)
    for k in (0, 1, 2):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 2 * k + 1, 2 * k + 1))
        np.testing.assert_allclose(conv2d(x, w), conv2d_reference(x, w), atol=1e-12)


def test_conv_backward_is_transpose_conv():
    rng = RNG(1)
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    dy = np.ones((1, 3, 6, 6))
    dx, _ = conv2d_backward(x, w, dy)
    # transpose-convolution oracle: scatter w * dy(p) to p + d
    ref = np.zeros((1, 2, 8, 8))
    for o in range(3):
        for i in range(2):
            for r in range(6):
                for c in range(6):
                    ref[0, i, r:r + 3, c:c + 3] += w[o, i] * dy[0, o, r, c]
    np.testing.assert_allclose(dx, ref[:, :, 1:7, 1:7], atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 2, 2)))


# -------------------------------------------------------------- group conv


def test_c1_delta_kernel_doubles():
    c1 = CyclicGroup(1)
    layer = GroupConvLayer(c1, 1, 1, 1)
    layer.params["kernel"][...] = 0
    layer.params["kernel"][0, 0, 0, 1, 1] = 2.0
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 3] = 1.0
    np.testing.assert_array_equal(layer(x), 2 * x)


def test_c4_pointwise_channel_example():
    layer = GroupConvLayer(C4, 1, 1, 0)
    layer.params["kernel"][...] = 0
    layer.params["kernel"][0] = 1.0
    x = np.broadcast_to(np.array([1.0, 2, 3, 4])[None, :, None, None], (1, 4, 3, 3)).copy()
    y = layer(x)
    np.testing.assert_array_equal(y[0, :, 1, 1], [1, 2, 3, 4])


def test_gconv_brute_force_double_sum():
    rng = RNG(2)
    k, n = 1, 4
    layer = GroupConvLayer(C4, 1, 1, k, rng=rng)
    x = rng.standard_normal((1, 4, 5, 5))
    y = layer(x)
    psi = layer.params["kernel"][:, 0, 0]
    xp = np.pad(x[0], ((0, 0), (1, 1), (1, 1)))
    for r in range(n):
        for row in range(5):
            for col in range(5):
                acc = 0.0
                for s in range(n):
                    kern = rotate_grid(psi[(s - r) % n], n, r)  # kern(y) = psi(R_r^-1 y)
                    acc += np.sum(xp[s, row:row + 3, col:col + 3] * kern)
                assert y[0, r, row, col] == pytest.approx(acc, abs=1e-12)


def test_gconv_equivariant_float32():
    rng = RNG(3)
    layer = GroupConvLayer(C4, 2, 2, 1, rng=rng, dtype=np.float32)
    x = rng.standard_normal((2, 8, 10, 10)).astype(np.float32)
    assert _equiv_defect(layer, x) <= 1e-5


def test_gconv_channel_mismatch():
    with pytest.raises(ShapeError):
        GroupConvLayer(C4, 1, 1, 1)(np.zeros((1, 6, 4, 4)))


def test_rgconv_single_bank_ones_equals_gconv():
    rng = RNG(4)
    relaxed = RelaxedGroupConvLayer(C4, 1, 2, 1, banks=1, rng=rng)
    relaxed.params["relax"][...] = 1.0
    strict = GroupConvLayer(C4, 1, 2, 1)
    strict.params["kernel"][...] = relaxed.params["kernel"][0]
    x = rng.standard_normal((2, 4, 6, 6))
    assert np.abs(relaxed(x) - strict(x)).max() <= 1e-6


def test_rgconv_zero_relax_and_banks():
    layer = RelaxedGroupConvLayer(C4, 1, 1, 1, banks=2, rng=RNG(5))
    layer.params["relax"][...] = 0
    assert np.all(layer(RNG(6).standard_normal((1, 4, 5, 5))) == 0)
    with pytest.raises(ConfigError):
        RelaxedGroupConvLayer(C4, 1, 1, 1, banks=0)


def test_rgconv_c2_hand_example():
    layer = RelaxedGroupConvLayer(CyclicGroup(2), 1, 1, 0, banks=1)
    layer.params["kernel"][...] = 1.0
    layer.params["relax"][...] = [[1.0, 3.0]]
    x = np.array([1.0, 2.0]).reshape(1, 2, 1, 1)
    np.testing.assert_array_equal(layer(x).ravel(), [7.0, 7.0])


def test_rgconv_starts_equivariant_and_breaks():
    rng = RNG(7)
    layer = RelaxedGroupConvLayer(C4, 1, 1, 1, rng=rng)
    x = rng.standard_normal((2, 4, 8, 8))
    assert _equiv_defect(layer, x) <= 1e-12
    layer.params["relax"][...] = rng.uniform(0.5, 1.5, layer.params["relax"].shape)
    assert _equiv_defect(layer, x) > 1e-3


# ---------------------------------------------------------- steerable conv


def test_steer_zero_weights():
    layer = SteerableConvLayer(C4.irrep(1), C4.regular(), 1, rng=RNG(0))
    for w in layer.params.values():
        w[...] = 0
    assert np.all(layer(RNG(1).standard_normal((1, 2, 6, 6))) == 0)


def test_steer_c1_full_basis_is_dense_conv():
    rng = RNG(8)
    c1 = CyclicGroup(1)
    layer = SteerableConvLayer(c1.trivial() * 2, c1.trivial() * 3, 1, rng=rng)
    assert layer.basis.size == 3 * 2 * 9
    w = layer.params["w:trivial<-trivial"]  # (3, 2, 9)
    w[...] = rng.standard_normal(w.shape)
    blk = layer.basis.blocks[("trivial", "trivial")][:, 0, 0]  # (9, 3, 3)
    kern = np.einsum("pql,luv->pquv", w, blk)
    x = rng.standard_normal((2, 2, 7, 7))
    np.testing.assert_allclose(layer(x), conv2d_reference(x, kern), atol=1e-6)


def test_steer_equivariance_c4_float32():
    rng = RNG(9)
    for rin, rout in [(C4.trivial() + C4.irrep(1), C4.regular() * 2), (C4.regular(), C4.irrep(1) + C4.irrep(2))]:
        layer = SteerableConvLayer(rin, rout, 2, rng=rng, dtype=np.float32)
        x = rng.standard_normal((100, rin.dim, 16, 16)).astype(np.float32)
        assert model_ee(layer, x, C4, rin, rout).ee <= 1e-5


def test_steer_rep_mismatch():
    layer = SteerableConvLayer(C4.irrep(1), C4.trivial(), 1)
    with pytest.raises(ShapeError):
        layer(np.zeros((1, 3, 4, 4)))
    other = solve_basis(C4, C4.trivial(), C4.trivial(), 1)
    with pytest.raises(ConfigError):
        SteerableConvLayer(C4.irrep(1), C4.trivial(), 1, basis=other)


def test_rsteer_constant_equals_steer():
    rng = RNG(10)
    strict = SteerableConvLayer(C4.regular(), C4.irrep(1) + C4.trivial(), 1, rng=rng)
    relaxed = RelaxedSteerableConvLayer(strict.rep_in, strict.rep_out, 1, basis=strict.basis)
    for key, w in relaxed.params.items():
        w[...] = strict.params[key]
    x = rng.standard_normal((2, 4, 8, 8))
    assert np.abs(relaxed(x) - strict(x)).max() <= 1e-6


def test_rsteer_center_indicator_is_pointwise():
    rng = RNG(11)
    rin, rout = C4.irrep(1) + C4.trivial(), C4.regular()
    layer = RelaxedSteerableConvLayer(rin, rout, 1, rng=rng)
    for w in layer.params.values():
        center = rng.standard_normal(w.shape[2:])
        w[...] = 0
        w[1, 1] = center
    # oracle: per-pixel matrix multiply with the center tap of sum_l w0_l Phi_l
    m = np.zeros((rout.dim, rin.dim))
    lo, li = layer.basis.layout_out, layer.basis.layout_in
    for pair in layer.basis.pairs():
        w0 = layer.params[f"w:{pair[0]}<-{pair[1]}"][1, 1]
        blk = layer.basis.blocks[pair][..., 1, 1]  # (L, da, db)
        oi, ii = lo.index[pair[0]], li.index[pair[1]]
        t = np.einsum("pql,lai->paqi", w0, blk).reshape(oi.size, ii.size)
        m[np.ix_(oi, ii)] = t
    x = rng.standard_normal((2, rin.dim, 5, 5))
    np.testing.assert_allclose(layer(x), np.einsum("oi,bihw->bohw", m, x), atol=1e-12)


@pytest.mark.parametrize("angular", [False, True])
def test_rsteer_random_weights_break_equivariance(angular):
    rng = RNG(12)
    layer = RelaxedSteerableConvLayer(C4.trivial() + C4.irrep(1), C4.regular(), 1, angular=angular, rng=rng)
    x = rng.standard_normal((20, 3, 12, 12))
    assert model_ee(layer, x, C4, layer.rep_in, layer.rep_out).ee <= 1e-12
    for w in layer.params.values():
        w *= rng.uniform(0.5, 1.5, w.shape)
    assert model_ee(layer, x, C4, layer.rep_in, layer.rep_out).ee > 1e-3


def test_angular_buckets():
    k = 2
    b = angular_buckets(k, 4)
    assert b[k, k] == 0
    assert sorted(set(b.ravel())) == [0, 1, 2, 3, 4]
    # a quarter turn (x, y) -> (-y, x) advances every non-center offset by one sector
    for u in range(2 * k + 1):
        for v in range(2 * k + 1):
            x, y = v - k, u - k
            if (x, y) == (0, 0):
                continue
            assert b[x + k, -y + k] == b[u, v] % 4 + 1


def test_lowrank_reduction_and_zero():
    rng = RNG(13)
    rin, rout = C4.irrep(1), C4.regular()
    low = LowRankTranslationLayer(rin, rout, 1, (6, 6), rank=1, rng=rng)
    low.params["a"][...] = 1.0
    rel = RelaxedSteerableConvLayer(rin, rout, 1, basis=low.basis)
    for key in rel.params:
        rel.params[key][...] = low.params[key][0]
    x = rng.standard_normal((2, 2, 6, 6))
    assert np.abs(low(x) - rel(x)).max() <= 1e-6
    low.params["a"][...] = 0
    assert np.all(low(x) == 0)
    with pytest.raises(ShapeError):
        low(np.zeros((1, 2, 5, 5)))


def test_lowrank_dense_oracle():
    rng = RNG(14)
    rin, rout = C4.trivial() + C4.irrep(1), C4.irrep(1)
    k, h = 1, 8
    low = LowRankTranslationLayer(rin, rout, k, (h, h), rank=2, rng=rng)
    for p in low.params.values():
        p[...] = rng.standard_normal(p.shape)
    x = rng.standard_normal((1, 3, h, h))
    # materialise the full position-and-offset dependent kernel W[x, y] and brute-force the sum
    kernels = low.rank_kernels()  # (R, Co, Ci, K, K): per-rank sum_l b_{r,l}(y) Phi_l(y)
    a = low.params["a"]
    xp = np.pad(x[0], ((0, 0), (k, k), (k, k)))
    ref = np.zeros((rout.dim, h, h))
    for r in range(h):
        for c in range(h):
            w = np.einsum("r,roiuv->oiuv", a[:, r, c], kernels)
            ref[:, r, c] = np.einsum("oiuv,iuv->o", w, xp[:, r:r + 3, c:c + 3])
    np.testing.assert_allclose(low(x)[0], ref, atol=1e-6)


def test_reductions_exhaustive_sizes():
    for res in reductions_suite(instances=30, seed=3):
        assert res.passed, res.line()


# ----------------------------------------------------------- generic layers


@pytest.mark.parametrize("family", [f for f in LAYER_FAMILIES if f != "relu"])
def test_linearity(family):
    rng = RNG(15)
    layer, x = random_layer(family, rng)
    x2 = rng.standard_normal(x.shape)
    a, b = 0.7, -1.3
    np.testing.assert_allclose(layer(a * x + b * x2), a * layer(x) + b * layer(x2), atol=1e-6)


@pytest.mark.parametrize("family", LAYER_FAMILIES)
def test_zero_upstream_gives_zero_grads(family):
    layer, x = random_layer(family, RNG(16))
    y, cache = layer.forward(x)
    dx, grads = layer.backward(cache, np.zeros_like(y))
    assert not dx.any()
    assert all(not g.any() for g in grads.values())
    assert set(grads) == set(layer.params)


@pytest.mark.parametrize("family", LAYER_FAMILIES)
def test_gradients_match_finite_differences(family):
    rng = RNG(17)
    worst = max(layer_gradcheck(family, rng, samples=8) for _ in range(3))
    assert worst <= 1e-6


def test_lc_and_conv_shapes():
    lc = LocallyConnectedLayer(C4.trivial(), C4.trivial(), 1, (5, 5), rng=RNG(0))
    with pytest.raises(ShapeError):
        lc(np.zeros((1, 1, 4, 4)))
    conv = ConvLayer(2, 3, 1)
    assert conv(np.zeros((1, 2, 4, 4))).shape == (1, 3, 4, 4)
    with pytest.raises(ConfigError):
        ConvLayer(2, 3, 1, rep_in=C4.trivial())


def test_relu_examples():
    np.testing.assert_array_equal(relu(np.array([-1.0, 2.0])), [0, 2])
    rng = RNG(18)
    f = rng.standard_normal((1, 8, 6, 6))
    rep = C4.regular() * 2
    layer = ReLU(rep)
    for g in C4.elements():
        np.testing.assert_array_equal(layer(act_array(rep, g, f)), act_array(rep, g, layer(f)))


def test_relu_gradient_away_from_zero():
    rng = RNG(19)
    f = rng.standard_normal(200)
    f = f[np.abs(f) > 0.1]
    r = rng.standard_normal(f.shape)
    err = fd_relative_error(lambda: float(np.sum(relu(f) * r)), {"f": f}, {"f": relu_backward(f, r)},
                            rng, samples=20, h=1e-5)
    assert err <= 1e-6
