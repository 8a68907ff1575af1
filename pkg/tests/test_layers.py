"""
Equivariance laws of the P4 layers, the scale branch, fusion, and layer gradients.
"""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from equirobust.groups import (GroupShapeError, P4Group, ScaleGroup, TrivialGroup, get_group, resize_array,
                               verify_group_axioms)
from equirobust.layers import (BatchNorm2d, Conv2d, Dense, Fusion, FusionShapeError, GroupBatchNorm, GroupPool,
                               P4GroupConv, P4LiftConv, ScaleEquivariantConv, ScaleResizeError, fuse, group_pool,
                               p4_group_conv, p4_lift_conv, scale_equivariant_conv)
from equirobust.tensor import Tensor, input_gradient, numerical_gradient

P4 = P4Group()


def test_group_axioms():
    assert verify_group_axioms(P4)
    assert verify_group_axioms(TrivialGroup())
    assert P4.compose(3, 2) == 1
    assert P4.inverse(1) == 3


def test_p4_action_is_a_permutation(rng):
    for g in P4.elements:
        m = P4.permutation_matrix(g, 5, 5)
        np.testing.assert_array_equal(m @ m.T, np.eye(25))
    x = rng.normal(size=(2, 5, 5))
    for a in P4.elements:
        for b in P4.elements:
            np.testing.assert_array_equal(P4.act_input(a, P4.act_input(b, x)), P4.act_input(P4.compose(a, b), x))


def test_lift_conv_equivariance(rng):
    layer = P4LiftConv(2, 3, 3, rng=rng)
    for _ in range(100):
        x = rng.normal(size=(1, 2, 7, 7))
        base = layer(Tensor(x)).data
        for r in P4.elements:
            rotated = layer(Tensor(P4.act_input(r, x))).data
            assert np.max(np.abs(rotated - P4.act_features(r, base))) <= 1e-10


def test_group_conv_equivariance(rng):
    layer = P4GroupConv(2, 3, 3, rng=rng)
    for _ in range(100):
        h = rng.normal(size=(1, 2, 4, 6, 6))
        base = layer(Tensor(h)).data
        for r in P4.elements:
            rotated = layer(Tensor(P4.act_features(r, h))).data
            assert np.max(np.abs(rotated - P4.act_features(r, base))) <= 1e-10


def test_group_pool_invariance(rng):
    for _ in range(100):
        h = rng.normal(size=(2, 3, 4, 5, 5))
        for mode in ("max", "mean"):
            base = group_pool(Tensor(h), mode).data
            for r in P4.elements:
                pooled = group_pool(Tensor(P4.act_features(r, h)), mode).data
                np.testing.assert_allclose(pooled, P4.act_input(r, base), atol=1e-10)


def test_group_batch_norm_equivariance_train_and_eval(rng):
    norm = GroupBatchNorm(3)
    for _ in range(100):
        h = rng.normal(size=(4, 3, 4, 5, 5))
        for training in (True, False):
            norm.train(training)
            base = norm(Tensor(h)).data
            for r in P4.elements:
                out = norm(Tensor(P4.act_features(r, h))).data
                assert np.max(np.abs(out - P4.act_features(r, base))) <= 1e-10


def test_group_layers_reject_maps_without_four_orientations():
    with pytest.raises(GroupShapeError):
        group_pool(Tensor(np.zeros((1, 2, 3, 5, 5))))
    with pytest.raises(GroupShapeError):
        GroupBatchNorm(2)(Tensor(np.zeros((1, 2, 5, 5, 5))))


def test_lift_conv_needs_square_odd_kernel():
    with pytest.raises(ValueError):
        p4_lift_conv(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 2, 2))))


def test_lift_conv_with_a_centred_delta_copies_the_input(rng):
    delta = np.zeros((1, 1, 3, 3))
    delta[0, 0, 1, 1] = 1.0
    x = rng.normal(size=(2, 1, 6, 6))
    out = p4_lift_conv(Tensor(x), Tensor(delta)).data
    assert out.shape == (2, 1, 4, 6, 6)
    for r in P4.elements:
        np.testing.assert_allclose(out[:, 0, r], x[:, 0], atol=1e-12)
    ones = p4_lift_conv(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3)))).data
    np.testing.assert_allclose(ones[0, 0, :, 1:-1, 1:-1], 9.0)


def _fd_check(fn, x, rtol=1e-5):
    _, analytic = input_gradient(fn, x)
    numeric = numerical_gradient(lambda a: float(fn(Tensor(a)).item()), x)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=1e-8)


def test_p4_layer_gradients(rng):
    lift_w = Tensor(rng.normal(size=(2, 1, 3, 3)))
    group_w = Tensor(rng.normal(size=(2, 2, 4, 3, 3)))
    for _ in range(20):
        x = rng.normal(size=(1, 1, 5, 5))
        _fd_check(lambda t: (p4_group_conv(p4_lift_conv(t, lift_w), group_w) ** 2).sum(), x)
        _fd_check(lambda t: (group_pool(p4_lift_conv(t, lift_w), "mean") ** 2).sum(), x)


def test_filter_gradients_of_p4_layers(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)))
    h = Tensor(rng.normal(size=(1, 2, 4, 5, 5)))
    for _ in range(20):
        _fd_check(lambda w: (p4_lift_conv(x, w) ** 2).sum(), rng.normal(size=(3, 2, 3, 3)))
        _fd_check(lambda w: (p4_group_conv(h, w) ** 2).sum(), rng.normal(size=(1, 2, 4, 3, 3)))


def test_batch_norm_gradient_in_train_mode(rng):
    norm = BatchNorm2d(2)
    weights = Tensor(rng.normal(size=(3, 2, 3, 3)))
    for _ in range(20):
        x = rng.normal(size=(3, 2, 3, 3))
        _fd_check(lambda t: (norm(t) * weights).sum(), x)


def test_dense_and_conv_layer_gradients(rng):
    conv = Conv2d(2, 3, 3, padding_mode="reflect", rng=rng)
    dense = Dense(12, 2, rng=rng)
    for _ in range(20):
        x = rng.normal(size=(1, 2, 4, 4))
        _fd_check(lambda t: (conv(t) ** 2).sum(), x)
        _fd_check(lambda t: (dense(t.reshape(1, 12)) ** 2).sum(), rng.normal(size=(2, 6)))


def test_scale_conv_gradient(rng):
    layer = ScaleEquivariantConv(1, 2, [0.75, 1.0, 1.25], 3, "concat", rng=rng)
    for _ in range(20):
        _fd_check(lambda t: (layer(t) ** 2).sum(), rng.normal(size=(1, 1, 8, 8)))


def test_scale_conv_with_identity_factor_equals_standard_conv(rng):
    layer = ScaleEquivariantConv(2, 3, [1.0], 3, "concat", rng=rng)
    x = Tensor(rng.normal(size=(2, 2, 6, 6)))
    np.testing.assert_array_equal(layer(x).data, layer.conv(x).data)


def test_scale_conv_output_shapes(rng):
    x = Tensor(rng.normal(size=(1, 1, 8, 8)))
    concat = ScaleEquivariantConv(1, 2, [0.75, 1.0, 1.25], 3, "concat", rng=rng)
    average = ScaleEquivariantConv(1, 2, [0.75, 1.0, 1.25], 3, "average", rng=rng)
    assert concat(x).shape == (1, 6, 8, 8)
    assert concat.out_channels == 6
    assert average(x).shape == (1, 2, 8, 8)


def test_scale_conv_with_duplicate_factors_equals_one_branch(rng):
    layer = ScaleEquivariantConv(2, 3, [1.0, 1.0], 3, "average", rng=rng)
    x = Tensor(rng.normal(size=(2, 2, 6, 6)))
    np.testing.assert_allclose(layer(x).data, layer.conv(x).data, rtol=1e-12, atol=1e-12)


def _smooth_field(rng, size, sigma=4.0):
    field = gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
    return (field / field.std())[None, None]


def test_scale_conv_is_approximately_scale_equivariant(rng):
    # resizing the input by β moves the response of branch α to branch αβ
    factors, width = [0.5, 1.0, 2.0], 4
    for _ in range(20):
        filters = Tensor(rng.normal(size=(width, 1, 3, 3)))
        x = _smooth_field(rng, 32)
        base = scale_equivariant_conv(Tensor(x), filters, factors, padding_mode="reflect").data
        for beta, shift in ((2.0, 1), (0.5, -1)):
            n = int(32 * beta)
            moved = scale_equivariant_conv(Tensor(resize_array(x, (n, n))), filters, factors,
                                           padding_mode="reflect").data
            expected = resize_array(base, (n, n))
            for i in range(len(factors)):
                j = i + shift
                if not 0 <= j < len(factors):
                    continue
                got = moved[:, i * width:(i + 1) * width]
                want = expected[:, j * width:(j + 1) * width]
                assert np.linalg.norm(got - want) / np.linalg.norm(want) < 0.15


def test_scale_branch_too_small_raises(rng):
    filters = Tensor(rng.normal(size=(1, 1, 3, 3)))
    with pytest.raises(ScaleResizeError):
        scale_equivariant_conv(Tensor(np.zeros((1, 1, 4, 4))), filters, [0.5])


def test_learnable_branch_weights_receive_gradient(rng):
    layer = ScaleEquivariantConv(1, 2, [0.75, 1.0], 3, "average", branch_weights=[0.5, 0.5], rng=rng)
    out = layer(Tensor(rng.normal(size=(1, 1, 8, 8))))
    out.sum().backward()
    assert layer.branch_weights.grad is not None
    assert layer.branch_weights.grad.shape == (2,)


def test_fuse_modes(rng):
    a = Tensor(rng.normal(size=(1, 2, 4, 4)))
    b = Tensor(rng.normal(size=(1, 3, 4, 4)))
    assert fuse([a, b], "concat").shape == (1, 5, 4, 4)
    with pytest.raises(FusionShapeError):
        fuse([a, b], "weighted_sum", Tensor(np.zeros(2)))
    with pytest.raises(FusionShapeError):
        fuse([a, Tensor(np.zeros((1, 2, 5, 5)))], "concat")
    c = Tensor(rng.normal(size=(1, 2, 4, 4)))
    np.testing.assert_allclose(fuse([a, c], "weighted_sum", Tensor(np.zeros(2))).data, 0.5 * (a.data + c.data))


def test_weighted_sum_with_one_hot_weights_returns_the_first_branch(rng):
    branches = [Tensor(rng.normal(size=(1, 2, 4, 4))) for _ in range(3)]
    out = fuse(branches, "weighted_sum", Tensor(np.array([0.0, -np.inf, -np.inf]))).data
    np.testing.assert_array_equal(out, branches[0].data)


def test_weighted_sum_logit_gradient(rng):
    branches = [Tensor(rng.normal(size=(1, 2, 4, 4))) for _ in range(3)]
    weights = Tensor(rng.normal(size=(1, 2, 4, 4)))
    for _ in range(20):
        _fd_check(lambda theta: (fuse(branches, "weighted_sum", theta) * weights).sum(), rng.normal(size=3))


def test_fusion_weights_form_a_distribution():
    fusion = Fusion(3, "weighted_sum", init_logits=[0.0, 1.0, 2.0])
    w = fusion.weights()
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.all(np.diff(w) > 0)


def test_scale_group_is_not_frame_alignable(rng):
    group = get_group("ScaleSet", [0.5, 1.0, 2.0])
    assert isinstance(group, ScaleGroup)
    assert group.act_input(0.5, rng.normal(size=(1, 8, 8))).shape == (1, 4, 4)
    with pytest.raises(NotImplementedError):
        group.align(2.0, np.zeros((1, 8, 8)))


def test_resize_array_identity_copy(rng):
    x = rng.normal(size=(2, 6, 6))
    y = resize_array(x, (6, 6))
    np.testing.assert_array_equal(x, y)
    assert y is not x


def test_state_dict_round_trip(rng):
    src = GroupPool("max")
    assert src.state_dict() == {}
    a, b = BatchNorm2d(3), BatchNorm2d(3)
    a.weight.data = rng.normal(size=3)
    a.train()(Tensor(rng.normal(size=(4, 3, 2, 2))))
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(b.running_mean, a.running_mean)
    np.testing.assert_array_equal(b.weight.data, a.weight.data)
    with pytest.raises(KeyError):
        b.load_state_dict({"weight": a.weight.data})
