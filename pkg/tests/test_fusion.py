"""Fusion seams: cross attention exchange, intermediary-token stages, merges."""

import numpy as np
import pytest

from oracles import numpy_weights, ref_transformer_layer
from rgbh.backbones import CONV, TRANSFORMER, ModelConfig
from rgbh.errors import ShapeMismatch, TokenCountMismatch
from rgbh.fusion import (
    Paradigm,
    ParadigmSpec,
    cross_fuse,
    init_intermediary_token,
    init_merge,
    timf_fuse,
    timf_stage1,
    timf_stage2,
)
from rgbh.tensor import Tensor
from rgbh.transformer import (
    TokenSequence,
    cross_transformer_layer,
    init_transformer_layer,
    layer_param_count,
    transformer_layer,
)

CFG = ModelConfig(backbone=TRANSFORMER, embed_dim=8, num_heads=2, patch_size=4, depth=1, dtype="f64")


def layer_params(rng, prefix, cfg=CFG):
    params = {}
    init_transformer_layer(params, prefix, cfg.stage, rng, dtype=cfg.np_dtype)
    for name, t in params.items():
        if t.data.ndim == 1 and not name.endswith(("ln1.g", "ln2.g")):
            params[name] = Tensor(rng.standard_normal(t.shape) * 0.02, dtype=cfg.np_dtype, requires_grad=True)
    return params


def seq(rng, n, tag="rgb", d=8):
    return TokenSequence(Tensor(rng.standard_normal((n, d)), dtype=np.float64), (tag,) * n)


def zeros_like_params(params):
    return {k: Tensor(np.zeros(v.shape), dtype=v.dtype) for k, v in params.items()}


class TestParadigmSpec:
    def test_token_only_kinds_reject_conv(self):
        for kind in (Paradigm.CROSS, Paradigm.INTERMEDIARY):
            with pytest.raises(ShapeMismatch):
                ParadigmSpec(kind=kind, backbone=CONV)

    def test_conv_legal_kinds(self):
        for kind in (
            Paradigm.SINGLE_RGB,
            Paradigm.SINGLE_HEIGHT,
            Paradigm.EARLY,
            Paradigm.FEATURE,
            Paradigm.LATE,
        ):
            ParadigmSpec(kind=kind, backbone=CONV)
            ParadigmSpec(kind=kind, backbone=TRANSFORMER)


class TestStage1:
    def test_token_count_partition(self):
        rng = np.random.default_rng(0)
        params = layer_params(rng, "fuse.s1.")
        m = Tensor(rng.standard_normal((1, 8)), dtype=np.float64)
        z_rgb, z_h, m2 = timf_stage1(seq(rng, 12), seq(rng, 12, "height"), m, params, CFG)
        assert z_rgb.count == 12 and z_h.count == 12
        assert m2.shape == (1, 8)
        assert set(z_rgb.tags) == {"rgb"} and set(z_h.tags) == {"height"}

    def test_zero_weights_identity(self):
        rng = np.random.default_rng(1)
        params = zeros_like_params(layer_params(rng, "fuse.s1."))
        r, h = seq(rng, 3), seq(rng, 2, "height")
        m = Tensor(rng.standard_normal((1, 8)), dtype=np.float64)
        z_rgb, z_h, m2 = timf_stage1(r, h, m, params, CFG)
        np.testing.assert_array_equal(z_rgb.tokens.data, r.tokens.data)
        np.testing.assert_array_equal(z_h.tokens.data, h.tokens.data)
        np.testing.assert_array_equal(m2.data, m.data)

    def test_matches_dense_reference(self):
        rng = np.random.default_rng(2)
        params = layer_params(rng, "fuse.s1.")
        r, h = seq(rng, 2), seq(rng, 2, "height")
        m = Tensor(rng.standard_normal((1, 8)), dtype=np.float64)
        z_rgb, z_h, m2 = timf_stage1(r, h, m, params, CFG)

        joint = np.concatenate([r.tokens.data, h.tokens.data, m.data], axis=0)
        ref = ref_transformer_layer(joint, numpy_weights(params), "fuse.s1.", heads=2)
        np.testing.assert_allclose(z_rgb.tokens.data, ref[:2], atol=1e-6)
        np.testing.assert_allclose(z_h.tokens.data, ref[2:4], atol=1e-6)
        np.testing.assert_allclose(m2.data, ref[4:5], atol=1e-6)


class TestStage2:
    def _params(self, rng):
        return {**layer_params(rng, "fuse.s2rgb."), **layer_params(rng, "fuse.s2h.")}

    def test_zero_weights_identity(self):
        rng = np.random.default_rng(3)
        params = zeros_like_params(self._params(rng))
        zr, zh = seq(rng, 4), seq(rng, 4, "height")
        m = Tensor(rng.standard_normal((1, 8)), dtype=np.float64)
        outs = timf_stage2(zr, zh, m, params, CFG)
        np.testing.assert_array_equal(outs.z_rgb.tokens.data, zr.tokens.data)
        np.testing.assert_array_equal(outs.z_h.tokens.data, zh.tokens.data)
        np.testing.assert_array_equal(outs.m_rgb.data, m.data)
        np.testing.assert_array_equal(outs.m_h.data, m.data)

    def test_rgb_branch_independent_of_height(self):
        rng = np.random.default_rng(4)
        params = self._params(rng)
        zr = seq(rng, 4)
        m = Tensor(rng.standard_normal((1, 8)), dtype=np.float64)
        out_a = timf_stage2(zr, seq(rng, 4, "height"), m, params, CFG)
        out_b = timf_stage2(zr, seq(rng, 4, "height"), m, params, CFG)
        np.testing.assert_array_equal(out_a.z_rgb.tokens.data, out_b.z_rgb.tokens.data)
        np.testing.assert_array_equal(out_a.m_rgb.data, out_b.m_rgb.data)

    def test_matches_dense_reference(self):
        rng = np.random.default_rng(5)
        params = self._params(rng)
        zr, zh = seq(rng, 2), seq(rng, 3, "height")
        m = Tensor(rng.standard_normal((1, 8)), dtype=np.float64)
        outs = timf_stage2(zr, zh, m, params, CFG)
        w = numpy_weights(params)
        ref_r = ref_transformer_layer(
            np.concatenate([zr.tokens.data, m.data]), w, "fuse.s2rgb.", heads=2
        )
        ref_h = ref_transformer_layer(
            np.concatenate([zh.tokens.data, m.data]), w, "fuse.s2h.", heads=2
        )
        np.testing.assert_allclose(outs.z_rgb.tokens.data, ref_r[:2], atol=1e-6)
        np.testing.assert_allclose(outs.m_rgb.data, ref_r[2:3], atol=1e-6)
        np.testing.assert_allclose(outs.z_h.tokens.data, ref_h[:3], atol=1e-6)
        np.testing.assert_allclose(outs.m_h.data, ref_h[3:4], atol=1e-6)


class TestTimfFuse:
    def _params(self, rng):
        params = {}
        init_intermediary_token(params, "fuse.", CFG, rng)
        for p in ("fuse.s1.", "fuse.s2rgb.", "fuse.s2h."):
            params.update(layer_params(rng, p))
        init_merge(params, "fuse.merge.", CFG, rng)
        return params

    def test_output_shape_contract(self):
        rng = np.random.default_rng(6)
        params = self._params(rng)
        fused = timf_fuse(seq(rng, 5), seq(rng, 5, "height"), params["fuse.m"], params, CFG)
        assert fused.count == 10 and fused.dim == 8
        assert fused.tags == ("rgb",) * 5 + ("height",) * 5

    def test_fusion_point_parameter_accounting(self):
        rng = np.random.default_rng(7)
        params = self._params(rng)
        per_layer = layer_param_count(CFG.stage)
        stage_count = sum(
            t.size
            for n, t in params.items()
            if n.startswith(("fuse.s1.", "fuse.s2rgb.", "fuse.s2h."))
        )
        assert stage_count == 3 * per_layer
        assert params["fuse.m"].size == CFG.embed_dim
        merge = sum(t.size for n, t in params.items() if n.startswith("fuse.merge."))
        assert merge == CFG.embed_dim * CFG.embed_dim + CFG.embed_dim


class TestCrossFuse:
    def _params(self, rng):
        params = {**layer_params(rng, "fuse.xrgb."), **layer_params(rng, "fuse.xh.")}
        init_merge(params, "fuse.merge.", CFG, rng)
        return params

    def test_identical_inputs_shared_weights_reduce_to_self_attention(self):
        rng = np.random.default_rng(8)
        shared = layer_params(rng, "fuse.x.")
        x = seq(rng, 4)
        crossed = cross_transformer_layer(x, x, shared, CFG.stage, "fuse.x.")
        plain = transformer_layer(x, shared, CFG.stage, "fuse.x.")
        np.testing.assert_allclose(crossed.tokens.data, plain.tokens.data, atol=1e-6)
        ref = ref_transformer_layer(x.tokens.data, numpy_weights(shared), "fuse.x.", heads=2)
        np.testing.assert_allclose(crossed.tokens.data, ref, atol=1e-6)

    def test_token_counts_preserved(self):
        rng = np.random.default_rng(9)
        params = self._params(rng)
        fused = cross_fuse(seq(rng, 6), seq(rng, 6, "height"), params, CFG)
        assert fused.count == 12 and fused.dim == 8

    def test_stream_count_mismatch(self):
        rng = np.random.default_rng(10)
        params = self._params(rng)
        with pytest.raises(TokenCountMismatch):
            cross_fuse(seq(rng, 4), seq(rng, 5, "height"), params, CFG)

    def test_zero_weights_cross_layer_is_identity(self):
        rng = np.random.default_rng(11)
        shared = zeros_like_params(layer_params(rng, "fuse.x."))
        x, other = seq(rng, 4), seq(rng, 4, "height")
        out = cross_transformer_layer(x, other, shared, CFG.stage, "fuse.x.")
        np.testing.assert_array_equal(out.tokens.data, x.tokens.data)
