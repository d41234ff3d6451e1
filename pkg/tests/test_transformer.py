"""Patch embedding, attention, and transformer layer contracts."""

import numpy as np
import pytest

from oracles import numpy_weights, ref_msa, ref_transformer_layer
from rgbh.errors import IndivisibleSpatialExtent, TokenCountMismatch
from rgbh.tensor import Tensor, tape, tmean, tsum
from rgbh.tensor.gradcheck import directional_check
from rgbh.transformer import (
    TokenSequence,
    TransformerStageConfig,
    init_msa,
    init_patch_embed,
    init_transformer_layer,
    msa,
    patch_embed,
    transformer_layer,
    trunc_normal,
)

CFG = TransformerStageConfig(embed_dim=8, num_heads=2, patch_size=8, max_tokens=16)


def make_layer(rng, dtype=np.float64, cfg=CFG):
    params = {}
    init_transformer_layer(params, "tl.", cfg, rng, dtype=dtype)
    # break the symmetric zero-bias init so oracles see generic values
    for name, t in params.items():
        if name.endswith(("b", "b1", "b2", "bq", "bk", "bv", "bo")):
            params[name] = Tensor(
                rng.standard_normal(t.shape) * 0.02, dtype=dtype, requires_grad=True
            )
    return params


class TestPatchEmbed:
    def _params(self, rng, channels=3, dtype=np.float64):
        params = {}
        init_patch_embed(params, "e.", CFG, channels, rng, dtype=dtype)
        return params

    def test_single_patch(self):
        rng = np.random.default_rng(0)
        params = self._params(rng)
        img = Tensor(rng.standard_normal((3, 8, 8)), dtype=np.float64)
        seq = patch_embed(img, params, CFG, "e.")
        assert seq.count == 1 and seq.dim == 8
        assert seq.tags == ("rgb",)

    def test_zero_image_isolates_positional_rows(self):
        rng = np.random.default_rng(1)
        params = self._params(rng)
        img = Tensor(np.zeros((3, 16, 16)), dtype=np.float64)
        seq = patch_embed(img, params, CFG, "e.")
        np.testing.assert_array_equal(seq.tokens.data, params["e.pos"].data[:4])

    def test_row_major_order_via_patch_permutation(self):
        # permuting input patches permutes tokens identically (2x2 grid)
        rng = np.random.default_rng(2)
        params = self._params(rng)
        img = rng.standard_normal((3, 16, 16))
        base = patch_embed(Tensor(img, dtype=np.float64), params, CFG, "e.").tokens.data
        pos = params["e.pos"].data

        # swap the two top patches in image space
        swapped = img.copy()
        swapped[:, :8, :8], swapped[:, :8, 8:] = img[:, :8, 8:], img[:, :8, :8]
        out = patch_embed(Tensor(swapped, dtype=np.float64), params, CFG, "e.").tokens.data
        # token k = proj(patch_k) + pos_k, so swapping patches 0,1 swaps the
        # projection part while positional rows stay put
        np.testing.assert_allclose(out[0] - pos[0], base[1] - pos[1], atol=1e-12)
        np.testing.assert_allclose(out[1] - pos[1], base[0] - pos[0], atol=1e-12)
        np.testing.assert_allclose(out[2:], base[2:], atol=1e-12)

    def test_indivisible_extent(self):
        rng = np.random.default_rng(3)
        params = self._params(rng)
        with pytest.raises(IndivisibleSpatialExtent):
            patch_embed(Tensor(np.zeros((3, 12, 16))), params, CFG, "e.")

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(4)
        params = self._params(rng)
        batch = rng.standard_normal((2, 3, 16, 16))
        both = patch_embed(Tensor(batch, dtype=np.float64), params, CFG, "e.").tokens.data
        for i in range(2):
            one = patch_embed(Tensor(batch[i], dtype=np.float64), params, CFG, "e.").tokens.data
            np.testing.assert_array_equal(both[i], one)


class TestMsa:
    def _seq(self, rng, n, tag="rgb"):
        return TokenSequence(Tensor(rng.standard_normal((n, 8)), dtype=np.float64), (tag,) * n)

    def test_single_key_value_ignores_logit(self):
        # softmax over one element is 1: output must be v @ wo + bo no
        # matter how the query scales the logit
        rng = np.random.default_rng(5)
        params = {}
        init_msa(params, "m.", CFG, rng, dtype=np.float64)
        kv = self._seq(rng, 1)
        out_a = msa(self._seq(rng, 1), kv, kv, params, CFG, "m.").tokens.data
        out_b = msa(self._seq(rng, 1), kv, kv, params, CFG, "m.").tokens.data
        np.testing.assert_allclose(out_a, out_b, atol=1e-12)
        w = numpy_weights(params)
        v = kv.tokens.data @ w["m.wv"] + w["m.bv"]
        np.testing.assert_allclose(out_a, v @ w["m.wo"] + w["m.bo"], atol=1e-12)

    def test_self_attention_matches_dense_oracle(self):
        rng = np.random.default_rng(6)
        params = {}
        init_msa(params, "m.", CFG, rng, dtype=np.float64)
        x = self._seq(rng, 4)
        got = msa(x, x, x, params, CFG, "m.").tokens.data
        ref = ref_msa(x.tokens.data, x.tokens.data, x.tokens.data, numpy_weights(params), "m.", 2)
        np.testing.assert_allclose(got, ref, atol=1e-10)

    def test_duplicate_key_value_permutation_invariance(self):
        rng = np.random.default_rng(7)
        params = {}
        init_msa(params, "m.", CFG, rng, dtype=np.float64)
        q = self._seq(rng, 3)
        kv_tokens = rng.standard_normal((2, 8))
        orders = [kv_tokens, kv_tokens[::-1].copy()]
        outs = []
        for arr in orders:
            kv = TokenSequence(Tensor(arr, dtype=np.float64), ("rgb", "rgb"))
            outs.append(msa(q, kv, kv, params, CFG, "m.").tokens.data)
        np.testing.assert_allclose(outs[0], outs[1], atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(8)
        params = {}
        init_msa(params, "m.", CFG, rng, dtype=np.float64)
        q, kv = self._seq(rng, 5), self._seq(rng, 7)
        _, attn = msa(q, kv, kv, params, CFG, "m.", return_attn=True)
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_kv_count_mismatch(self):
        rng = np.random.default_rng(9)
        params = {}
        init_msa(params, "m.", CFG, rng, dtype=np.float64)
        with pytest.raises(TokenCountMismatch):
            msa(self._seq(rng, 2), self._seq(rng, 2), self._seq(rng, 3), params, CFG, "m.")


class TestTransformerLayer:
    def test_zero_weights_is_identity(self):
        params = {}
        init_transformer_layer(params, "tl.", CFG, np.random.default_rng(0), dtype=np.float64)
        zeroed = {k: Tensor(np.zeros(v.shape), dtype=np.float64) for k, v in params.items()}
        rng = np.random.default_rng(10)
        x = TokenSequence(Tensor(rng.standard_normal((5, 8)), dtype=np.float64))
        out = transformer_layer(x, zeroed, CFG, "tl.")
        np.testing.assert_array_equal(out.tokens.data, x.tokens.data)

    def test_matches_dense_reference(self):
        rng = np.random.default_rng(11)
        params = make_layer(rng)
        x = rng.standard_normal((4, 8))
        got = transformer_layer(
            TokenSequence(Tensor(x, dtype=np.float64)), params, CFG, "tl."
        ).tokens.data
        ref = ref_transformer_layer(x, numpy_weights(params), "tl.", heads=2)
        np.testing.assert_allclose(got, ref, atol=1e-6)

    def test_preserves_count_and_dim(self):
        rng = np.random.default_rng(12)
        params = make_layer(rng)
        x = TokenSequence(Tensor(rng.standard_normal((7, 8)), dtype=np.float64), ("rgb",) * 7)
        out = transformer_layer(x, params, CFG, "tl.")
        assert out.count == 7 and out.dim == 8 and out.tags == x.tags

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_gradients_vs_finite_differences(self, dtype):
        rng = np.random.default_rng(13)
        params = make_layer(rng, dtype=dtype)
        x_np = rng.standard_normal((4, 8))

        def loss(ps):
            dt = next(iter(ps.values())).dtype
            x = TokenSequence(Tensor(x_np, dtype=dt))
            return tmean(transformer_layer(x, ps, CFG, "tl.").tokens)

        directional_check(loss, params, rng, num_directions=10)

    def test_input_gradient_flows(self):
        rng = np.random.default_rng(14)
        params = make_layer(rng)
        x = Tensor(rng.standard_normal((4, 8)), dtype=np.float64, requires_grad=True)
        with tape() as t:
            out = transformer_layer(TokenSequence(x), params, CFG, "tl.")
            grads = t.backward(tsum(out.tokens))
        assert grads[x].shape == (4, 8)
        assert np.abs(grads[x]).max() > 0


class TestTruncNormal:
    def test_bounded_by_two_std(self):
        rng = np.random.default_rng(15)
        t = trunc_normal(rng, (4096,), std=0.02)
        assert float(np.abs(t.data).max()) <= 0.04 + 1e-9
        assert abs(float(t.data.std()) - 0.02) < 0.004
