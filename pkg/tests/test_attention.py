"""Attention algebra: fixtures against an independent reference, and the
permutation-equivariance property."""

import numpy as np
import pytest

from fusedet.diffcore import ShapeError, Tensor
from fusedet.fusenet import MultiHeadAttention, TransformerLayer, attention

from oracles import attention_reference


class TestAttentionFixtures:
    def test_zero_queries_give_uniform_weights_and_mean_output(self):
        rng = np.random.default_rng(0)
        v = Tensor(rng.normal(size=(5, 3)).astype(np.float32))
        zeros = Tensor(np.zeros((5, 2), np.float32))
        out, weights = attention(zeros, zeros, v)
        np.testing.assert_allclose(weights.data, 0.2, atol=1e-6)
        expected = np.tile(v.data.mean(axis=0), (5, 1))
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_single_token(self):
        q = Tensor(np.array([[2.0, -1.0]], np.float32))
        v = Tensor(np.array([[5.0, 7.0, 9.0]], np.float32))
        out, weights = attention(q, q, v)
        np.testing.assert_allclose(weights.data, [[1.0]], atol=1e-7)
        np.testing.assert_allclose(out.data, v.data, atol=1e-7)

    def test_two_token_fixture(self):
        # frozen from the float64 reference in oracles.attention_reference
        q = Tensor(np.eye(2, dtype=np.float32))
        v = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], np.float32))
        out, weights = attention(q, q, v)
        expected_w = np.array([[0.669761549327, 0.330238450673],
                               [0.330238450673, 0.669761549327]])
        expected_o = np.array([[1.66047690135, 2.66047690135],
                               [2.33952309865, 3.33952309865]])
        np.testing.assert_allclose(weights.data, expected_w, atol=1e-4)
        np.testing.assert_allclose(out.data, expected_o, atol=1e-4)
        ref_o, ref_w = attention_reference(q.data, q.data, v.data)
        np.testing.assert_allclose(expected_w, ref_w, atol=1e-10)
        np.testing.assert_allclose(expected_o, ref_o, atol=1e-10)

    def test_matches_reference_on_random_inputs(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            q = rng.normal(size=(6, 4)).astype(np.float32)
            k = rng.normal(size=(6, 4)).astype(np.float32)
            v = rng.normal(size=(6, 3)).astype(np.float32)
            out, weights = attention(Tensor(q), Tensor(k), Tensor(v))
            ref_o, ref_w = attention_reference(q, k, v)
            np.testing.assert_allclose(weights.data, ref_w, atol=1e-5)
            np.testing.assert_allclose(out.data, ref_o, atol=1e-5)

    def test_dk_mismatch_rejected(self):
        q = Tensor(np.zeros((3, 4), np.float32))
        k = Tensor(np.zeros((3, 5), np.float32))
        with pytest.raises(ShapeError, match="d_k"):
            attention(q, k, Tensor(np.zeros((3, 2), np.float32)))


class TestAttentionProperties:
    def test_rows_stochastic(self):
        rng = np.random.default_rng(11)
        q = Tensor(rng.normal(size=(2, 8, 4)).astype(np.float32))
        _, weights = attention(q, q, q)
        assert (weights.data >= 0).all() and (weights.data <= 1).all()
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(13)
        q = rng.normal(size=(7, 4)).astype(np.float32)
        k = rng.normal(size=(7, 4)).astype(np.float32)
        v = rng.normal(size=(7, 5)).astype(np.float32)
        perm = rng.permutation(7)
        out, weights = attention(Tensor(q), Tensor(k), Tensor(v))
        out_p, weights_p = attention(Tensor(q[perm]), Tensor(k[perm]),
                                     Tensor(v[perm]))
        np.testing.assert_allclose(out_p.data, out.data[perm], atol=1e-5)
        np.testing.assert_allclose(weights_p.data,
                                   weights.data[perm][:, perm], atol=1e-5)


class TestMultiHead:
    def test_weight_shape_and_row_sums(self):
        rng = np.random.default_rng(17)
        mha = MultiHeadAttention(rng, d_model=16, num_heads=4)
        x = Tensor(rng.normal(size=(2, 6, 16)).astype(np.float32))
        out, weights = mha(x)
        assert out.shape == (2, 6, 16)
        assert weights.shape == (2, 4, 6, 6)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-5)

    def test_d_model_head_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            MultiHeadAttention(np.random.default_rng(0), d_model=10, num_heads=4)

    def test_transformer_layer_shape_preserved(self):
        rng = np.random.default_rng(19)
        layer = TransformerLayer(rng, d_model=8, num_heads=2)
        x = Tensor(rng.normal(size=(3, 5, 8)).astype(np.float32))
        out, weights = layer(x)
        assert out.shape == x.shape
        assert weights.shape == (3, 2, 5, 5)
