"""Shape contracts, structural invariants, and configuration validation for
the forecaster."""

import numpy as np
import pytest

from invdec.model import (
    ConfigError,
    ModelConfig,
    backbone_forward,
    default_fusion_weight,
    forward,
    init_params,
    parameter_groups,
    patchify,
)
from invdec.rng import RngPool, stream
from invdec.tensor import GradTape, Parameter, Tensor, backward, mse, zero_grads


def small_cfg(**kw) -> ModelConfig:
    base = dict(
        n_vars=5, lookback=96, horizon=12, patch_len=16, stride=16,
        d_model=8, n_heads=2, enc_layers=2, dec_layers=1,
        dropout=0.0, fusion_weight=0.7,
    )
    base.update(kw)
    return ModelConfig(**base)


def rand_x(cfg, seed=0, batch=None):
    rng = stream(seed, "test/model-x")
    shape = (cfg.lookback, cfg.n_vars) if batch is None else (batch, cfg.lookback, cfg.n_vars)
    return Tensor(rng.normal(size=shape))


class TestConfig:
    def test_patch_count(self):
        assert small_cfg().n_patches == 6
        assert small_cfg(stride=8).n_patches == 11
        assert ModelConfig(n_vars=2, lookback=10, patch_len=4, stride=4,
                           d_model=8, n_heads=2, horizon=4).n_patches == 2

    def test_ffn_default(self):
        assert small_cfg().ffn_dim == 32
        assert small_cfg(ffn_dim=10).ffn_dim == 10

    def test_validation(self):
        with pytest.raises(ConfigError, match="patch_len"):
            small_cfg(patch_len=100)
        with pytest.raises(ConfigError, match="divisible"):
            small_cfg(d_model=9)
        with pytest.raises(ConfigError, match="dropout"):
            small_cfg(dropout=1.0)
        with pytest.raises(ConfigError, match="fusion"):
            small_cfg(fusion_weight=1.5)
        with pytest.raises(ConfigError, match="fusion"):
            small_cfg(fusion_weight="bogus")
        with pytest.raises(ConfigError, match="n_vars"):
            small_cfg(n_vars=0)
        with pytest.raises(ConfigError, match="positive integer"):
            small_cfg(d_model=8.0)

    def test_auto_fusion_resolution(self):
        assert small_cfg(n_vars=21, fusion_weight="auto").resolved_fusion() == 0.3
        assert small_cfg(n_vars=321, fusion_weight="auto").resolved_fusion() == 1.0
        assert small_cfg(n_vars=50, fusion_weight="auto").resolved_fusion() == 1.0
        assert small_cfg(fusion_weight="learnable").resolved_fusion() == "learnable"
        assert small_cfg(fusion_weight=0.25).resolved_fusion() == 0.25

    def test_default_fusion_weight_bands(self):
        assert default_fusion_weight(7) == 0.3
        assert default_fusion_weight(21) == 0.3
        assert default_fusion_weight(100) == 1.0
        assert default_fusion_weight(862) == 1.0

    def test_dict_round_trip(self):
        cfg = small_cfg(fusion_weight="learnable")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestPatchify:
    def test_values_non_overlapping(self):
        cfg = ModelConfig(n_vars=2, lookback=8, patch_len=4, stride=4,
                          d_model=4, n_heads=1, horizon=2)
        x = np.arange(16.0).reshape(8, 2)
        got = patchify(Tensor(x), cfg).data
        assert got.shape == (2, 2, 4)
        for c in range(2):
            for p in range(2):
                np.testing.assert_array_equal(got[c, p], x[p * 4 : p * 4 + 4, c])

    def test_overlapping_stride(self):
        cfg = ModelConfig(n_vars=1, lookback=8, patch_len=4, stride=2,
                          d_model=4, n_heads=1, horizon=2)
        x = np.arange(8.0).reshape(8, 1)
        got = patchify(Tensor(x), cfg).data
        assert got.shape == (1, 3, 4)
        np.testing.assert_array_equal(got[0, 1], [2, 3, 4, 5])

    def test_trailing_residue_dropped(self):
        cfg = ModelConfig(n_vars=1, lookback=10, patch_len=4, stride=4,
                          d_model=4, n_heads=1, horizon=2)
        x = np.arange(10.0).reshape(10, 1)
        got = patchify(Tensor(x), cfg).data
        assert got.shape == (1, 2, 4)  # steps 8 and 9 never appear
        assert got.max() == 7.0

    def test_rejects_tracked_input(self):
        cfg = small_cfg()
        p = Parameter(np.zeros((cfg.lookback, cfg.n_vars)), "x")
        with pytest.raises(ValueError, match="raw data"):
            patchify(p, cfg)

    def test_batched(self):
        cfg = ModelConfig(n_vars=3, lookback=8, patch_len=4, stride=4,
                          d_model=4, n_heads=1, horizon=2)
        x = stream(0, "t").normal(size=(7, 8, 3))
        got = patchify(Tensor(x), cfg).data
        assert got.shape == (7, 3, 2, 4)
        single = patchify(Tensor(x[2]), cfg).data
        np.testing.assert_array_equal(got[2], single)


class TestForwardShapes:
    def test_unbatched_shapes_and_trace(self):
        cfg = small_cfg()
        params = init_params(cfg, seed=0)
        out, trace = forward(rand_x(cfg), params, cfg)
        assert out.shape == (12, 5)
        assert trace.embedded.shape == (5, 6, 8)
        assert trace.encoded.shape == (5, 6, 8)
        assert trace.pooled.shape == (5, 8)
        assert trace.variate_tokens.shape == (5, 8)
        assert trace.decoded.shape == (5, 8)
        assert trace.broadcast.shape == (5, 6, 8)
        assert trace.fused.shape == (5, 6, 8)
        assert len(trace.enc_attn) == 2 and len(trace.dec_attn) == 1
        assert trace.enc_attn[0].shape == (5, 2, 6, 6)
        assert trace.dec_attn[0].shape == (2, 5, 5)

    def test_batched_shapes(self):
        cfg = small_cfg()
        params = init_params(cfg, seed=0)
        out, trace = forward(rand_x(cfg, batch=7), params, cfg)
        assert out.shape == (7, 12, 5)
        assert trace.encoded.shape == (7, 5, 6, 8)
        assert trace.enc_attn[0].shape == (7, 5, 2, 6, 6)

    def test_batched_equals_stacked_singles(self):
        cfg = small_cfg()
        params = init_params(cfg, seed=0)
        xb = rand_x(cfg, batch=4)
        batched, _ = forward(xb, params, cfg, want_trace=False)
        for i in range(4):
            single, _ = forward(Tensor(xb.data[i]), params, cfg, want_trace=False)
            np.testing.assert_allclose(batched.data[i], single.data, rtol=0, atol=1e-12)


class TestStructuralInvariants:
    def test_attention_rows_sum_to_one(self):
        cfg = small_cfg()
        params = init_params(cfg, seed=1)
        _, trace = forward(rand_x(cfg, seed=2), params, cfg)
        maps = trace.attention_maps()
        assert maps
        for m in maps:
            np.testing.assert_allclose(m.data.sum(axis=-1), 1.0, rtol=0, atol=1e-9)

    def test_encoder_is_channel_independent(self):
        cfg = small_cfg(fusion_weight=0.0)
        params = init_params(cfg, seed=3)
        x = rand_x(cfg, seed=4).data.copy()
        _, tr_full = forward(Tensor(x), params, cfg)
        x2 = x.copy()
        x2[:, 2] = 0.0
        _, tr_cut = forward(Tensor(x2), params, cfg)
        for c in range(cfg.n_vars):
            same = np.array_equal(tr_full.encoded.data[c], tr_cut.encoded.data[c])
            assert same == (c != 2)

    def test_joint_encoder_crosses_channels(self):
        cfg = small_cfg(fusion_weight=0.0, joint_encoder=True)
        params = init_params(cfg, seed=3)
        x = rand_x(cfg, seed=4).data.copy()
        out, tr_full = forward(Tensor(x), params, cfg)
        assert out.shape == (12, 5)
        x2 = x.copy()
        x2[:, 2] = 0.0
        _, tr_cut = forward(Tensor(x2), params, cfg)
        # attention now mixes variables, so untouched channels change too
        assert not np.array_equal(tr_full.encoded.data[0], tr_cut.encoded.data[0])

    def test_decoder_permutation_equivariance(self):
        cfg = small_cfg(fusion_weight=1.0)
        params = init_params(cfg, seed=5)
        x = rand_x(cfg, seed=6)
        out, _ = forward(x, params, cfg, want_trace=False)

        perm = np.array([3, 0, 4, 1, 2])
        params_p = init_params(cfg, seed=5)
        params_p.variate_embedding.data[...] = params.variate_embedding.data[perm]
        out_p, _ = forward(Tensor(x.data[:, perm]), params_p, cfg, want_trace=False)
        np.testing.assert_allclose(out_p.data, out.data[:, perm], rtol=0, atol=1e-10)


class TestFusionPaths:
    def test_zero_fusion_skips_decoder(self):
        cfg = small_cfg(fusion_weight=0.0)
        params = init_params(cfg, seed=7)
        x = rand_x(cfg, seed=8)
        out, trace = forward(x, params, cfg)
        assert trace.pooled is None
        assert trace.decoded is None
        assert trace.broadcast is None
        assert trace.dec_attn == []
        assert trace.fused is trace.encoded
        bb = backbone_forward(x, params, cfg)
        np.testing.assert_array_equal(out.data, bb.data)

    def test_nonzero_fusion_changes_output(self):
        params = init_params(small_cfg(), seed=7)
        x = rand_x(small_cfg(), seed=8)
        full, _ = forward(x, params, small_cfg(fusion_weight=0.5), want_trace=False)
        bb = backbone_forward(x, params, small_cfg(fusion_weight=0.0))
        assert not np.array_equal(full.data, bb.data)

    def test_fusion_scales_linearly(self):
        cfg1 = small_cfg(fusion_weight=1.0)
        params = init_params(cfg1, seed=9)
        x = rand_x(cfg1, seed=10)
        _, tr1 = forward(x, params, cfg1)
        _, tr_half = forward(x, params, small_cfg(fusion_weight=0.5))
        # same decoder output, half the injected residual
        inj1 = tr1.fused.data - tr1.encoded.data
        inj_half = tr_half.fused.data - tr_half.encoded.data
        np.testing.assert_allclose(inj_half, 0.5 * inj1, rtol=0, atol=1e-12)

    def test_learnable_fusion_gets_gradient(self):
        cfg = small_cfg(fusion_weight="learnable")
        params = init_params(cfg, seed=11)
        assert params.fusion_raw is not None
        x = rand_x(cfg, seed=12)
        target = Tensor(np.zeros((cfg.horizon, cfg.n_vars)))
        with GradTape() as tape:
            out, _ = forward(x, params, cfg, want_trace=False)
            loss = mse(out, target)
        zero_grads(params.parameters())
        backward(loss, tape)
        assert float(np.abs(params.fusion_raw.grad).max()) > 0.0
        # starts at the sigmoid midpoint
        assert params.fusion_raw.data[0] == 0.0

    def test_fixed_fusion_has_no_raw_parameter(self):
        assert init_params(small_cfg(fusion_weight=0.3), seed=0).fusion_raw is None


class TestDropoutStreams:
    def test_training_forward_needs_pool(self):
        cfg = small_cfg(dropout=0.1)
        params = init_params(cfg, seed=0)
        with pytest.raises(ValueError, match="RngPool"):
            forward(rand_x(cfg), params, cfg, training=True)

    def test_training_is_stream_deterministic(self):
        cfg = small_cfg(dropout=0.2)
        params = init_params(cfg, seed=0)
        x = rand_x(cfg, seed=1)
        a, _ = forward(x, params, cfg, training=True, rngs=RngPool(99), want_trace=False)
        b, _ = forward(x, params, cfg, training=True, rngs=RngPool(99), want_trace=False)
        np.testing.assert_array_equal(a.data, b.data)

    def test_encoder_stream_unaffected_by_decoder_skip(self):
        """Skipping the decoder must not shift the encoder's dropout draws."""
        params_full = init_params(small_cfg(dropout=0.2, fusion_weight=0.5), seed=0)
        x = rand_x(small_cfg(), seed=2)
        cfg0 = small_cfg(dropout=0.2, fusion_weight=0.0)
        out0, tr0 = forward(x, params_full, cfg0, training=True, rngs=RngPool(5))
        cfg5 = small_cfg(dropout=0.2, fusion_weight=0.5)
        out5, tr5 = forward(x, params_full, cfg5, training=True, rngs=RngPool(5))
        np.testing.assert_array_equal(tr0.encoded.data, tr5.encoded.data)
        assert not np.array_equal(out0.data, out5.data)


class TestInit:
    def test_deterministic_and_seed_sensitive(self):
        cfg = small_cfg()
        a = init_params(cfg, seed=0)
        b = init_params(cfg, seed=0)
        c = init_params(cfg, seed=1)
        for name, p in a.named().items():
            np.testing.assert_array_equal(p.data, b.named()[name].data)
        assert not np.array_equal(a.patch.weight.data, c.patch.weight.data)

    def test_shapes_and_groups(self):
        cfg = small_cfg()
        params = init_params(cfg, seed=0)
        assert params.patch.weight.shape == (8, 16)
        assert params.patch.positional.shape == (6, 8)
        assert params.variate_embedding.shape == (5, 8)
        assert params.head_weight.shape == (48, 12)
        names = [p.name for p in params.parameters()]
        assert len(names) == len(set(names))
        groups = parameter_groups(params)
        assert set(groups) == {"patch", "encoder.0", "encoder.1", "E_var",
                               "decoder.0", "W_proj", "head"}

    def test_init_statistics(self):
        cfg = small_cfg(d_model=64, n_heads=4, ffn_dim=256)
        params = init_params(cfg, seed=0)
        w = params.encoder[0].ffn_w1.data
        assert abs(w.std() - 0.02) < 0.002
        assert np.all(params.encoder[0].ln1_gain.data == 1.0)
        assert np.all(params.head_bias.data == 0.0)
