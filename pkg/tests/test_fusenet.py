"""Architecture contracts: shapes, residual identity, fusion causality,
pool-size clamping, cost model, end-to-end gradients."""

import numpy as np
import pytest

from fusedet.diffcore import ShapeError, Tensor, grad_check, ops
from fusedet.fusenet import (
    EncoderStage,
    FusionBlock,
    FusionConfig,
    FusionModel,
    UpsampleMerge,
    attention_cost,
    extract_attention_records,
)

BEV = (64, 64, 2)
CAM = (32, 96, 3)


def make_model(rng=None, **overrides):
    config = FusionConfig(**overrides)
    return FusionModel(config, rng or np.random.default_rng(0),
                       bev_shape=BEV, camera_shape=CAM)


class TestConfigValidation:
    def test_fusion_stages_require_fusion_modality(self):
        with pytest.raises(ValueError, match="fusion_stages"):
            FusionConfig(modality="lidar_only").validate()
        FusionConfig(modality="lidar_only", fusion_stages=()).validate()

    def test_d_model_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            FusionConfig(d_model=66, num_heads=4,
                         stage_channels=(16, 32, 64, 66)).validate()

    def test_stage_out_of_range(self):
        with pytest.raises(ValueError, match="stage 5"):
            FusionConfig(fusion_stages=(5,)).validate()

    def test_unknown_modality(self):
        with pytest.raises(ValueError, match="modality"):
            FusionConfig(modality="radar").validate()


class TestEncoderStage:
    def test_halves_spatial_dims_and_sets_channels(self):
        rng = np.random.default_rng(1)
        stage = EncoderStage(rng, 3, 16)
        out = stage(Tensor(rng.normal(size=(1, 32, 96, 3)).astype(np.float32)))
        assert out.shape == (1, 16, 48, 16)

    def test_four_stages_on_bev(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(1, 64, 64, 2)).astype(np.float32))
        for c_in, c_out in ((2, 16), (16, 32), (32, 64), (64, 64)):
            x = EncoderStage(rng, c_in, c_out)(x)
        assert x.shape == (1, 4, 4, 64)

    def test_zero_input_finite_output(self):
        rng = np.random.default_rng(3)
        out = EncoderStage(rng, 2, 8)(Tensor(np.zeros((1, 8, 8, 2), np.float32)))
        assert np.isfinite(out.data).all()

    def test_odd_dims_rejected(self):
        stage = EncoderStage(np.random.default_rng(4), 2, 8)
        with pytest.raises(ShapeError, match="even"):
            stage(Tensor(np.zeros((1, 7, 8, 2), np.float32)))


class TestFusionBlock:
    def make_block(self, rng, pool=8):
        shapes = {"bev": (16, 16), "camera": (8, 24)}
        return FusionBlock(rng, shapes, channels=64, pool_size=pool,
                           num_heads=4, num_layers=2, positional_embedding=True)

    def test_token_arithmetic_and_output_shapes(self):
        rng = np.random.default_rng(5)
        block = self.make_block(rng)
        views = {"bev": Tensor(rng.normal(size=(2, 16, 16, 64)).astype(np.float32)),
                 "camera": Tensor(rng.normal(size=(2, 8, 24, 64)).astype(np.float32))}
        out, weights = block(views)
        assert out["bev"].shape == (2, 16, 16, 64)
        assert out["camera"].shape == (2, 8, 24, 64)
        assert len(weights) == 2
        assert weights[0].shape == (2, 4, 128, 128)
        assert block.last_attention_entries == [128 * 128] * 8

    def test_zero_out_projection_gives_pure_residual(self):
        rng = np.random.default_rng(6)
        block = self.make_block(rng)
        assert not block.out_proj.w.data.any()        # built zero-initialized
        views = {"bev": Tensor(rng.normal(size=(1, 16, 16, 64)).astype(np.float32)),
                 "camera": Tensor(rng.normal(size=(1, 8, 24, 64)).astype(np.float32))}
        out, _ = block(views)
        np.testing.assert_array_equal(out["bev"].data, views["bev"].data)
        np.testing.assert_array_equal(out["camera"].data, views["camera"].data)

    def test_nonzero_projection_changes_views(self):
        rng = np.random.default_rng(7)
        block = self.make_block(rng)
        block.out_proj.w.data[:] = rng.normal(size=block.out_proj.w.shape) * 0.1
        views = {"bev": Tensor(rng.normal(size=(1, 16, 16, 64)).astype(np.float32)),
                 "camera": Tensor(rng.normal(size=(1, 8, 24, 64)).astype(np.float32))}
        out, _ = block(views)
        assert np.abs(out["bev"].data - views["bev"].data).max() > 1e-4

    def test_pool_exceeding_view_dims_rejected(self):
        rng = np.random.default_rng(8)
        with pytest.raises(ShapeError, match="pool size 8 exceeds"):
            FusionBlock(rng, {"bev": (4, 4), "camera": (2, 6)}, channels=64,
                        pool_size=8, num_heads=4, num_layers=1,
                        positional_embedding=True)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(9)
        block = self.make_block(rng)
        views = {"bev": Tensor(rng.normal(size=(1, 16, 16, 64)).astype(np.float32)),
                 "camera": Tensor(rng.normal(size=(1, 8, 24, 64)).astype(np.float32))}
        _, weights = block(views)
        for w in weights:
            assert (w.data >= 0).all() and (w.data <= 1).all()
            np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-5)


class TestUpsampleMerge:
    def test_shape(self):
        rng = np.random.default_rng(10)
        merge = UpsampleMerge(rng, 64, 32, 48)
        deep = Tensor(rng.normal(size=(1, 4, 4, 64)).astype(np.float32))
        skip = Tensor(rng.normal(size=(1, 8, 8, 32)).astype(np.float32))
        assert merge(deep, skip).shape == (1, 8, 8, 48)

    def test_projection_identity_on_skip(self):
        rng = np.random.default_rng(11)
        merge = UpsampleMerge(rng, 4, 3, 3)
        w = np.zeros((1, 1, 7, 3), np.float32)
        w[0, 0, 4:, :] = np.eye(3)                 # select only skip channels
        merge.proj.w.data = w
        merge.proj.b.data[:] = 0
        deep = Tensor(rng.normal(size=(1, 4, 4, 4)).astype(np.float32))
        skip = Tensor(rng.normal(size=(1, 8, 8, 3)).astype(np.float32))
        np.testing.assert_allclose(merge(deep, skip).data, skip.data, atol=1e-6)

    def test_spatial_mismatch_rejected(self):
        rng = np.random.default_rng(12)
        merge = UpsampleMerge(rng, 4, 3, 3)
        with pytest.raises(ShapeError, match="twice"):
            merge(Tensor(np.zeros((1, 4, 4, 4), np.float32)),
                  Tensor(np.zeros((1, 9, 8, 3), np.float32)))

    def test_three_merges_reach_one_eighth_of_input(self):
        model = make_model()
        out = model.forward(bev=Tensor(np.zeros((1,) + BEV, np.float32)),
                            camera=Tensor(np.zeros((1,) + CAM, np.float32)))
        assert out.bev_features.shape == (1, 32, 32, 32)


class TestModelForward:
    def test_fusion_34_shapes_and_record_stages(self):
        rng = np.random.default_rng(13)
        model = make_model(rng)
        out = model.forward(
            bev=Tensor(rng.normal(size=(1,) + BEV).astype(np.float32)),
            camera=Tensor(rng.normal(size=(1,) + CAM).astype(np.float32)))
        assert out.bev_features.shape == (1, 32, 32, 32)
        assert out.camera_features.shape == (1, 16, 48, 32)
        assert sorted(out.attention) == [3, 4]
        records = extract_attention_records(out)
        assert {r.stage for r in records} == {3, 4}
        for r in records:
            np.testing.assert_allclose(r.matrix.sum(axis=-1), 1.0, atol=1e-5)
            assert r.matrix.min() >= 0.0 and r.matrix.max() <= 1.0
        # stage 3 pools to 4x4 per view (camera map is 4x12), stage 4 to 2x2
        assert {r.num_tokens for r in records if r.stage == 3} == {32}
        assert {r.num_tokens for r in records if r.stage == 4} == {8}

    def test_lidar_only_no_records_no_camera(self):
        rng = np.random.default_rng(14)
        model = make_model(rng, modality="lidar_only", fusion_stages=())
        out = model.forward(bev=Tensor(np.zeros((1,) + BEV, np.float32)))
        assert out.camera_features is None
        assert out.attention == {}
        names = [n for n, _ in model.named_parameters()]
        assert not any("camera" in n for n in names)

    def test_modality_input_mismatch_rejected(self):
        model = make_model(np.random.default_rng(15), modality="camera_only",
                           fusion_stages=())
        with pytest.raises(ValueError, match="requires 'camera'"):
            model.forward(bev=None, camera=None)
        with pytest.raises(ValueError, match="takes no 'bev'"):
            model.forward(bev=Tensor(np.zeros((1,) + BEV, np.float32)),
                          camera=Tensor(np.zeros((1,) + CAM, np.float32)))

    def test_wrong_input_shape_rejected(self):
        model = make_model(np.random.default_rng(16))
        with pytest.raises(ShapeError, match="does not match configured"):
            model.forward(bev=Tensor(np.zeros((1, 32, 32, 2), np.float32)),
                          camera=Tensor(np.zeros((1,) + CAM, np.float32)))

    def test_deterministic_forward(self):
        rng = np.random.default_rng(17)
        model = make_model(rng)
        bev = Tensor(rng.normal(size=(1,) + BEV).astype(np.float32))
        cam = Tensor(rng.normal(size=(1,) + CAM).astype(np.float32))
        a = model.forward(bev=bev, camera=cam).bev_features.data
        b = model.forward(bev=bev, camera=cam).bev_features.data
        np.testing.assert_array_equal(a, b)

    def test_fusion_does_not_change_earlier_stages(self):
        rng = np.random.default_rng(18)
        model = make_model(rng)
        bev = Tensor(rng.normal(size=(1,) + BEV).astype(np.float32))
        cam = Tensor(rng.normal(size=(1,) + CAM).astype(np.float32))
        out = model.forward(bev=bev, camera=cam, collect_stages=True)
        # chain the raw encoder stages (no fusion) and compare up to the
        # first fused stage: features before stage 3's fusion must agree
        x = bev
        for s in range(1, 4):
            x = model.bev_stages[s - 1](x)
            if s < 3:
                np.testing.assert_array_equal(out.stage_features[("bev", s)],
                                              x.data)
        np.testing.assert_array_equal(out.stage_features[("bev", 3)], x.data)

    def test_permuting_fusion_stage_set_changes_nothing_below(self):
        rng_a = np.random.default_rng(19)
        rng_b = np.random.default_rng(19)
        m_all = make_model(rng_a, fusion_stages=(1, 2, 3, 4))
        m_late = make_model(rng_b, fusion_stages=(3, 4))
        x = np.random.default_rng(20).normal(size=(1,) + BEV).astype(np.float32)
        c = np.random.default_rng(21).normal(size=(1,) + CAM).astype(np.float32)
        out_all = m_all.forward(bev=Tensor(x), camera=Tensor(c))
        assert sorted(out_all.attention) == [1, 2, 3, 4]
        out_late = m_late.forward(bev=Tensor(x), camera=Tensor(c))
        assert sorted(out_late.attention) == [3, 4]


class TestEndToEndGradient:
    # finite differences through stacked ReLUs need the 64-bit test mode:
    # at float32-sized eps the probes cross activation kinks
    def _mini_model(self, seed):
        config = FusionConfig(fusion_stages=(2,), pool_size=2, d_model=8,
                              num_heads=2, num_layers_per_fusion=1,
                              stage_channels=(4, 8), decoder_channels=(4,))
        rng = np.random.default_rng(seed)
        model = FusionModel(config, rng, bev_shape=(8, 8, 2),
                            camera_shape=(8, 8, 2))
        for _, p in model.named_parameters():
            p.data = p.data.astype(np.float64)
        return model, rng

    def test_miniature_model_input_gradient(self):
        model, rng = self._mini_model(22)
        cam = Tensor(rng.normal(size=(1, 8, 8, 2)) * 0.5)

        def loss_of_input(x):
            out = model.forward(bev=x, camera=cam)
            return ops.mean(ops.mul(out.bev_features, out.bev_features))

        x0 = Tensor(rng.normal(size=(1, 8, 8, 2)) * 0.5)
        report = grad_check(loss_of_input, x0, eps=1e-4, tol=1e-2)
        assert report.passed, f"input gradient: {report.max_rel_error:.3e}"

    def test_miniature_model_parameter_gradient(self):
        model, rng = self._mini_model(22)
        cam = Tensor(rng.normal(size=(1, 8, 8, 2)) * 0.5)
        x0 = rng.normal(size=(1, 8, 8, 2)) * 0.5
        target = model.fusion_blocks[0].layers[0].attn.wq.w

        def forward_with(pdata):
            original = target.data
            target.data = pdata
            try:
                o = model.forward(bev=Tensor(x0), camera=cam)
                return float(ops.mean(ops.mul(o.bev_features,
                                              o.bev_features)).data)
            finally:
                target.data = original

        target.grad = None
        out_t = model.forward(bev=Tensor(x0), camera=cam)
        ops.mean(ops.mul(out_t.bev_features, out_t.bev_features)).backward()
        analytic = target.grad.reshape(-1)
        eps = 1e-4
        probe = target.data.copy().reshape(-1)
        checked = np.arange(0, probe.size, 7)       # subsample for speed
        numeric = np.zeros(checked.size)
        shape = target.data.shape
        for row, i in enumerate(checked):
            base = probe[i]
            probe[i] = base + eps
            f_plus = forward_with(probe.reshape(shape).copy())
            probe[i] = base - eps
            f_minus = forward_with(probe.reshape(shape).copy())
            probe[i] = base
            numeric[row] = (f_plus - f_minus) / (2 * eps)
        a = analytic[checked]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-6)
        assert (np.abs(a - numeric) / denom).max() <= 1e-2


class TestAttentionCost:
    def test_paper_formula(self):
        assert attention_cost(8, 8, 64) == 262_144
        assert attention_cost(16, 16, 64) == 4_194_304
        assert attention_cost(16, 16, 64) == 16 * attention_cost(8, 8, 64)
        assert attention_cost(1, 1, 77) == 77

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            attention_cost(0, 8, 64)

    def test_instrumented_entries_match_t_squared(self):
        rng = np.random.default_rng(23)
        model = make_model(rng)
        model.forward(bev=Tensor(np.zeros((1,) + BEV, np.float32)),
                      camera=Tensor(np.zeros((1,) + CAM, np.float32)))
        for block in model.fusion_blocks:
            t = 2 * block.tokens_per_view
            layers = len(block.layers)
            assert block.last_attention_entries == [t * t] * (layers * 4)
