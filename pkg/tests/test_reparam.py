import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adicurb.reparam import (
    BnParams,
    Branch,
    ConvParams,
    MobileOneBlockParams,
    block_from_json,
    block_to_json,
    bn_apply,
    bn_to_conv,
    conv2d,
    forward_fused,
    forward_train,
    fuse_bn,
    identity_conv,
    pad_1x1_to_3x3,
    random_block,
    random_bn,
    reparameterize_block,
)

from .oracles import conv2d_direct

EPS = 1e-5


def identity_bn(c, dtype=np.float64):
    return BnParams(np.zeros(c, dtype), np.full(c, 1 - EPS, dtype), np.ones(c, dtype), np.zeros(c, dtype), EPS)


def rand_conv(rng, cout, cin, k, groups):
    return ConvParams(rng.normal(size=(cout, cin // groups, k, k)), rng.normal(size=cout), groups)


class TestConv2d:
    def test_identity_1x1(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
        np.testing.assert_array_equal(conv2d(x, identity_conv(3, 1, groups=1)), x)

    def test_all_ones(self):
        out = conv2d(np.ones((1, 1, 3, 3)), ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1)))
        assert out.shape == (1, 1, 1, 1) and out.item() == 9

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        groups = int(rng.choice([1, 2, 4]))
        cin, cout = 4, 4 * int(rng.integers(1, 3))
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        p = rand_conv(rng, cout, cin, k, groups)
        x = rng.normal(size=(2, cin, 7, 6))
        ref = conv2d_direct(x, p.kernel, p.bias, groups, stride, pad)
        np.testing.assert_allclose(conv2d(x, p, stride, pad), ref, atol=1e-12)

    def test_output_dims(self):
        p = rand_conv(np.random.default_rng(0), 2, 2, 3, 1)
        assert conv2d(np.zeros((1, 2, 10, 9)), p, 2, 1).shape == (1, 2, 5, 5)

    def test_shape_errors(self):
        p = rand_conv(np.random.default_rng(0), 2, 2, 3, 1)
        with pytest.raises(ValueError):
            conv2d(np.zeros((1, 3, 5, 5)), p)
        with pytest.raises(ValueError):
            conv2d(np.zeros((2, 5, 5)), p)
        with pytest.raises(ValueError):
            ConvParams(np.zeros((3, 1, 3, 3)), np.zeros(3), groups=2)
        with pytest.raises(ValueError):
            ConvParams(np.zeros((1, 1, 5, 5)), np.zeros(1))


class TestFuseBn:
    def test_identity_bn(self):
        p = rand_conv(np.random.default_rng(1), 3, 3, 3, 3)
        f = fuse_bn(p, identity_bn(3))
        np.testing.assert_allclose(f.kernel, p.kernel, atol=1e-12)
        np.testing.assert_allclose(f.bias, p.bias, atol=1e-12)

    def test_affine_closed_form(self):
        bn = BnParams(np.zeros(2), np.full(2, 1 - EPS), np.full(2, 2.0), np.ones(2), EPS)
        x = np.random.default_rng(2).normal(size=(1, 2, 4, 4))
        out = conv2d(x, fuse_bn(identity_conv(2, 3), bn), padding=1)
        np.testing.assert_allclose(out, 2 * x + 1, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_functional_equality(self, seed):
        rng = np.random.default_rng(seed)
        p = rand_conv(rng, 4, 4, 3, 2)
        bn = random_bn(rng, 4)
        x = rng.normal(size=(2, 4, 6, 6))
        np.testing.assert_allclose(conv2d(x, fuse_bn(p, bn), 1, 1), bn_apply(conv2d(x, p, 1, 1), bn), atol=1e-9)

    def test_bn_validation(self):
        with pytest.raises(ValueError):
            BnParams(np.zeros(2), np.array([1.0, -1.0]), np.ones(2), np.zeros(2))
        with pytest.raises(ValueError):
            BnParams(np.zeros(2), np.ones(2), np.ones(2), np.zeros(2), 0.0)


class TestBnToConv:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 3, 5, 5))
        np.testing.assert_allclose(conv2d(x, bn_to_conv(identity_bn(3)), padding=1), x, atol=1e-12)

    def test_zero_gamma(self):
        bn = BnParams(np.ones(3), np.ones(3), np.zeros(3), np.zeros(3))
        x = np.random.default_rng(0).normal(size=(1, 3, 5, 5))
        assert not conv2d(x, bn_to_conv(bn), padding=1).any()

    def test_random(self):
        rng = np.random.default_rng(3)
        bn = random_bn(rng, 4)
        x = rng.normal(size=(2, 4, 5, 5))
        np.testing.assert_allclose(conv2d(x, bn_to_conv(bn), padding=1), bn_apply(x, bn), atol=1e-9)
        dense = bn_to_conv(bn, depthwise=False)
        assert dense.groups == 1
        np.testing.assert_allclose(conv2d(x, dense, padding=1), bn_apply(x, bn), atol=1e-9)

    def test_illegal(self):
        with pytest.raises(ValueError, match="identity branch illegal"):
            bn_to_conv(identity_bn(3), stride=2)
        with pytest.raises(ValueError, match="identity branch illegal"):
            bn_to_conv(identity_bn(3), channels=4)


class TestPad:
    def test_centre(self):
        p = ConvParams(np.array([[[[2.5]]]]), np.array([0.3]))
        q = pad_1x1_to_3x3(p)
        expected = np.zeros((1, 1, 3, 3))
        expected[0, 0, 1, 1] = 2.5
        np.testing.assert_array_equal(q.kernel, expected)
        assert q.bias[0] == 0.3

    def test_functional(self):
        rng = np.random.default_rng(0)
        p = rand_conv(rng, 4, 4, 1, 1)
        x = rng.normal(size=(1, 4, 6, 6))
        np.testing.assert_allclose(conv2d(x, pad_1x1_to_3x3(p), padding=1), conv2d(x, p), atol=1e-12)

    def test_zero(self):
        q = pad_1x1_to_3x3(ConvParams(np.zeros((2, 1, 1, 1)), np.zeros(2), 2))
        assert not q.kernel.any() and q.kernel.shape == (2, 1, 3, 3)

    def test_rejects_3x3(self):
        with pytest.raises(ValueError):
            pad_1x1_to_3x3(identity_conv(2, 3))


class TestBlock:
    def test_identity_bns_sum_kernels(self):
        rng = np.random.default_rng(0)
        c3 = rand_conv(rng, 3, 3, 3, 3)
        c1 = rand_conv(rng, 3, 3, 1, 3)
        block = MobileOneBlockParams((Branch(c3, identity_bn(3)),), Branch(c1, identity_bn(3)))
        f = reparameterize_block(block)
        np.testing.assert_allclose(f.kernel, c3.kernel + pad_1x1_to_3x3(c1).kernel, atol=1e-12)
        np.testing.assert_allclose(f.bias, c3.bias + c1.bias, atol=1e-12)

    def test_zero_weights_identity_skip(self):
        z3 = ConvParams(np.zeros((4, 1, 3, 3)), np.zeros(4), 4)
        z1 = ConvParams(np.zeros((4, 1, 1, 1)), np.zeros(4), 4)
        zero_bn = BnParams(np.zeros(4), np.ones(4), np.zeros(4), np.zeros(4))
        block = MobileOneBlockParams((Branch(z3, zero_bn),), Branch(z1, zero_bn), identity_bn(4))
        x = np.random.default_rng(0).normal(size=(1, 4, 6, 6))
        np.testing.assert_allclose(forward_fused(reparameterize_block(block), x), x, atol=1e-12)

    def test_single_identity_branch(self):
        block = MobileOneBlockParams((Branch(identity_conv(2, 3), identity_bn(2)),), None)
        x = np.random.default_rng(0).normal(size=(1, 2, 5, 5))
        np.testing.assert_allclose(forward_train(block, x), x, atol=1e-12)

    def test_linearity_in_k(self):
        rng = np.random.default_rng(4)
        br = Branch(rand_conv(rng, 3, 3, 3, 3), random_bn(rng, 3))
        x = rng.normal(size=(1, 3, 6, 6))
        one = forward_train(MobileOneBlockParams((br,), None), x)
        three = forward_train(MobileOneBlockParams((br, br, br), None), x)
        np.testing.assert_allclose(three, 3 * one, atol=1e-12)

    def test_central_oracle(self):
        rng = np.random.default_rng(2024)
        block = random_block(rng, 4, 8)
        x = rng.normal(size=(2, 8, 16, 16))
        assert np.abs(forward_train(block, x) - forward_fused(reparameterize_block(block), x)).max() <= 1e-9

    @pytest.mark.parametrize("seed", range(30))
    def test_random_blocks(self, seed):
        rng = np.random.default_rng(seed)
        k, c, s = int(rng.integers(1, 5)), int(rng.choice([1, 4, 8])), int(rng.integers(3, 33))
        block = random_block(rng, k, c, skip=bool(rng.integers(0, 2)))
        x = rng.normal(size=(1, c, s, s))
        assert np.abs(forward_train(block, x) - forward_fused(reparameterize_block(block), x)).max() <= 1e-9

    def test_single_precision(self):
        rng = np.random.default_rng(7)
        block = random_block(rng, 4, 8, dtype=np.float32)
        x = rng.normal(size=(1, 8, 32, 32)).astype(np.float32)
        fused = reparameterize_block(block)
        assert fused.kernel.dtype == np.float32
        assert np.abs(forward_train(block, x) - forward_fused(fused, x)).max() <= 1e-4

    def test_pointwise_block(self):
        rng = np.random.default_rng(8)
        block = random_block(rng, 3, 4, depthwise=False)
        x = rng.normal(size=(1, 4, 5, 5))
        assert np.abs(forward_train(block, x) - forward_fused(reparameterize_block(block), x)).max() <= 1e-9

    def test_additive_over_branches(self):
        rng = np.random.default_rng(9)
        block = random_block(rng, 4, 4, skip=False)
        whole = reparameterize_block(block)
        a = reparameterize_block(MobileOneBlockParams(block.branches_3x3[:2], None))
        b = reparameterize_block(MobileOneBlockParams(block.branches_3x3[2:], block.branch_1x1))
        np.testing.assert_allclose(whole.kernel, a.kernel + b.kernel, rtol=0, atol=1e-14)
        np.testing.assert_allclose(whole.bias, a.bias + b.bias, rtol=0, atol=1e-14)

    def test_illegal_identity(self):
        br = Branch(rand_conv(np.random.default_rng(0), 4, 2, 3, 1), identity_bn(4))
        with pytest.raises(ValueError, match="identity branch illegal"):
            MobileOneBlockParams((br,), None, identity_bn(4))
        br = Branch(identity_conv(2, 3), identity_bn(2))
        with pytest.raises(ValueError, match="identity branch illegal"):
            MobileOneBlockParams((br,), None, identity_bn(2), stride=2)

    def test_json_round_trip(self):
        block = random_block(np.random.default_rng(5), 2, 4)
        text = block_to_json(block)
        back = block_from_json(text)
        assert json.loads(block_to_json(back)) == json.loads(text)
        x = np.random.default_rng(6).normal(size=(1, 4, 6, 6))
        np.testing.assert_array_equal(forward_train(back, x), forward_train(block, x))


@given(st.integers(1, 4), st.sampled_from([1, 4, 8]), st.integers(3, 12), st.integers(0, 2**32 - 1))
def test_train_inference_equivalence(k, c, s, seed):
    rng = np.random.default_rng(seed)
    block = random_block(rng, k, c, skip=bool(seed % 2))
    x = rng.normal(size=(1, c, s, s))
    assert np.abs(forward_train(block, x) - forward_fused(reparameterize_block(block), x)).max() <= 1e-9


@given(st.integers(0, 2**32 - 1), st.floats(1e-6, 10))
def test_fuse_bn_property(seed, var):
    rng = np.random.default_rng(seed)
    p = rand_conv(rng, 2, 2, 3, 1)
    bn = BnParams(rng.normal(size=2), np.array([var, 1.0]), rng.normal(size=2), rng.normal(size=2))
    x = rng.normal(size=(1, 2, 5, 5))
    np.testing.assert_allclose(conv2d(x, fuse_bn(p, bn), 1, 1), bn_apply(conv2d(x, p, 1, 1), bn), atol=1e-9, rtol=1e-9)
