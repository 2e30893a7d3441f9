"""Activation maps: per-branch CAMs, attention averaging, fusion, dumps."""

import numpy as np
import pytest

from floc.cam import (
    CamMap,
    attention_average,
    conv_cam,
    fuse_cam,
    multi_scale_analysis,
    multi_scale_cam,
    normalize_map,
    read_camf,
    single_scale_cam,
    trans_cam,
    write_camf,
)
from floc.data import procedural_image
from floc.model import DualBranchModel, ModelConfig


class TestNormalization:
    def test_range(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = normalize_map(rng.normal(size=(6, 6)).astype(np.float32))
            assert n.min() >= 0.0 and n.max() <= 1.0

    def test_constant_maps_to_zero(self):
        n = normalize_map(np.full((4, 4), 3.3, dtype=np.float32))
        np.testing.assert_array_equal(n, 0.0)

    def test_spans_unit_interval(self):
        n = normalize_map(np.array([[1.0, 3.0], [5.0, 2.0]], dtype=np.float32))
        assert n.min() == 0.0 and n.max() == 1.0


class TestConvCam:
    def test_one_hot_weight_selects_channel(self):
        rng = np.random.default_rng(1)
        feat = rng.normal(size=(4, 5, 5)).astype(np.float32)
        w = np.zeros((2, 4), dtype=np.float32)
        w[1, 2] = 1.0
        cam = conv_cam(feat, w, class_id=1)
        np.testing.assert_array_equal(cam.raw, feat[2])

    def test_zero_weights_degenerate(self):
        feat = np.random.default_rng(2).normal(size=(4, 5, 5)).astype(np.float32)
        cam = conv_cam(feat, np.zeros((2, 4), dtype=np.float32), 1)
        np.testing.assert_array_equal(cam.raw, 0.0)
        np.testing.assert_array_equal(cam.normalized, 0.0)

    def test_matches_per_pixel_dot_product(self):
        rng = np.random.default_rng(3)
        feat = rng.normal(size=(6, 4, 4)).astype(np.float32)
        w = rng.normal(size=(2, 6)).astype(np.float32)
        cam = conv_cam(feat, w, 0)
        for y in range(4):
            for x in range(4):
                expect = float(np.dot(w[0], feat[:, y, x]))
                assert cam.raw[y, x] == pytest.approx(expect, rel=1e-5)

    def test_argmax_invariant_under_positive_scaling(self):
        rng = np.random.default_rng(4)
        feat = rng.normal(size=(6, 8, 8)).astype(np.float32)
        w = rng.normal(size=(2, 6)).astype(np.float32)
        a = conv_cam(feat, w, 1)
        b = conv_cam(feat, 7.3 * w, 1)
        assert np.argmax(a.raw) == np.argmax(b.raw)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            conv_cam(np.zeros((4, 5, 5)), np.zeros((2, 3)), 0)


class TestTransCam:
    def test_one_hot_weight_selects_embedding_coord(self):
        rng = np.random.default_rng(5)
        tok = rng.normal(size=(16, 8)).astype(np.float32)
        w = np.zeros((2, 8), dtype=np.float32)
        w[1, 3] = 1.0
        cam = trans_cam(tok, w, 1)
        np.testing.assert_allclose(cam.raw, tok[:, 3].reshape(4, 4))

    def test_equal_tokens_constant_normalizes_zero(self):
        tok = np.ones((9, 8), dtype=np.float32)
        cam = trans_cam(tok, np.random.default_rng(6).normal(size=(2, 8)).astype(np.float32), 1)
        np.testing.assert_array_equal(cam.normalized, 0.0)

    def test_matches_dot_products(self):
        rng = np.random.default_rng(7)
        tok = rng.normal(size=(9, 5)).astype(np.float32)
        w = rng.normal(size=(2, 5)).astype(np.float32)
        cam = trans_cam(tok, w, 0)
        np.testing.assert_allclose(cam.raw.reshape(-1), tok @ w[0], rtol=1e-5)

    def test_non_square_grid_rejected(self):
        with pytest.raises(ValueError, match="square grid"):
            trans_cam(np.zeros((7, 4)), np.zeros((2, 4)), 0)


class TestAttentionAverage:
    def test_identical_tokens_uniform(self):
        rng = np.random.default_rng(8)
        row = rng.normal(size=(1, 8)).astype(np.float32)
        q = np.repeat(row, 5, axis=0)
        a = attention_average([q], [q], dim=8, heads=2)
        np.testing.assert_allclose(a, 1.0 / 4, atol=1e-6)
        assert a.shape == (4, 4)

    def test_mean_with_itself_is_identity(self):
        rng = np.random.default_rng(9)
        q = rng.normal(size=(5, 8)).astype(np.float32)
        k = rng.normal(size=(5, 8)).astype(np.float32)
        once = attention_average([q], [k], 8, 2)
        twice = attention_average([q, q], [k, k], 8, 2)
        np.testing.assert_allclose(once, twice, atol=1e-7)

    def test_rows_are_distributions(self):
        rng = np.random.default_rng(10)
        qs = [rng.normal(size=(10, 8)).astype(np.float32) for _ in range(3)]
        ks = [rng.normal(size=(10, 8)).astype(np.float32) for _ in range(3)]
        a = attention_average(qs, ks, 8, 4)
        assert np.all(a >= 0)
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-5)

    def test_mismatched_layer_counts(self):
        q = np.zeros((5, 8), dtype=np.float32)
        with pytest.raises(ValueError, match="mismatched"):
            attention_average([q, q], [q], 8, 2)


class TestFuseCam:
    def test_uniform_attention_fixes_constant_conv(self):
        p = 16
        attn = np.full((p, p), 1.0 / p, dtype=np.float32)
        conv = CamMap.from_raw(np.full((4, 4), 2.5, dtype=np.float32), 1)
        trans = CamMap.from_raw(np.zeros((4, 4), dtype=np.float32), 1)
        fused = fuse_cam(trans, conv, attn)
        np.testing.assert_allclose(fused.raw, 2.5, rtol=1e-6)

    def test_zero_trans_keeps_refined_conv(self):
        rng = np.random.default_rng(11)
        attn = np.abs(rng.normal(size=(16, 16))).astype(np.float32)
        attn /= attn.sum(axis=-1, keepdims=True)
        conv = CamMap.from_raw(rng.normal(size=(4, 4)).astype(np.float32), 1)
        trans = CamMap.from_raw(np.zeros((4, 4), dtype=np.float32), 1)
        fused = fuse_cam(trans, conv, attn)
        refined = (attn.astype(np.float64) @ conv.raw.reshape(-1)).reshape(4, 4)
        np.testing.assert_allclose(fused.normalized, normalize_map(refined.astype(np.float32)), atol=1e-6)

    def test_fused_dominates_both_operands(self):
        rng = np.random.default_rng(12)
        attn = np.abs(rng.normal(size=(16, 16))).astype(np.float32)
        attn /= attn.sum(axis=-1, keepdims=True)
        conv = CamMap.from_raw(rng.normal(size=(4, 4)).astype(np.float32), 1)
        trans = CamMap.from_raw(rng.normal(size=(4, 4)).astype(np.float32), 1)
        fused = fuse_cam(trans, conv, attn)
        refined_norm = normalize_map(fused.raw)
        assert np.all(fused.normalized >= trans.normalized - 1e-7)
        assert np.all(fused.normalized >= refined_norm - 1e-7)

    def test_pools_conv_grid_down(self):
        rng = np.random.default_rng(13)
        attn = np.full((16, 16), 1.0 / 16, dtype=np.float32)
        conv = CamMap.from_raw(rng.normal(size=(8, 8)).astype(np.float32), 1)  # 2x the grid
        trans = CamMap.from_raw(rng.normal(size=(4, 4)).astype(np.float32), 1)
        fused = fuse_cam(trans, conv, attn)
        assert fused.raw.shape == (4, 4)

    def test_grid_mismatch_rejected(self):
        attn = np.full((16, 16), 1.0 / 16, dtype=np.float32)
        conv = CamMap.from_raw(np.zeros((4, 4), dtype=np.float32), 1)
        trans = CamMap.from_raw(np.zeros((5, 5), dtype=np.float32), 1)
        with pytest.raises(ValueError, match="incompatible"):
            fuse_cam(trans, conv, attn)


@pytest.fixture(scope="module")
def tiny_trained_free_model():
    return DualBranchModel(ModelConfig(input_size=32, blocks=2, channels=8, dim=16, heads=2), seed=3)


class TestMultiScale:
    def test_single_scale_equals_resized(self, tiny_trained_free_model):
        model = tiny_trained_free_model
        img = procedural_image(np.random.default_rng(14), 32)
        fused, _ = single_scale_cam(model, img, 32)
        agg = multi_scale_cam(model, img, [32])
        from floc.imgproc import bilinear_resize

        np.testing.assert_allclose(agg.raw, bilinear_resize(fused.raw, 32, 32), atol=1e-6)
        np.testing.assert_allclose(agg.normalized, normalize_map(agg.raw), atol=1e-7)

    def test_scores_average_over_scales(self, tiny_trained_free_model):
        model = tiny_trained_free_model
        img = procedural_image(np.random.default_rng(15), 32)
        _, s32 = single_scale_cam(model, img, 32)
        _, s48 = single_scale_cam(model, img, 48)
        _, mean_score = multi_scale_analysis(model, img, [32, 48])
        assert mean_score == pytest.approx((s32 + s48) / 2, abs=1e-7)

    def test_repeated_scale_equals_single(self, tiny_trained_free_model):
        model = tiny_trained_free_model
        img = procedural_image(np.random.default_rng(16), 32)
        once = multi_scale_cam(model, img, [32])
        thrice = multi_scale_cam(model, img, [32, 32, 32])
        np.testing.assert_allclose(once.raw, thrice.raw, atol=1e-6)

    def test_output_at_source_resolution(self, tiny_trained_free_model):
        img = procedural_image(np.random.default_rng(17), 40)
        cam = multi_scale_cam(tiny_trained_free_model, img, [32, 48])
        assert cam.raw.shape == (40, 40)

    def test_empty_scales_rejected(self, tiny_trained_free_model):
        img = procedural_image(np.random.default_rng(18), 32)
        with pytest.raises(ValueError, match="nonempty"):
            multi_scale_cam(tiny_trained_free_model, img, [])


class TestCamfDump:
    def test_roundtrip(self, tmp_path):
        raw = np.random.default_rng(19).normal(size=(6, 9)).astype(np.float32)
        cam = CamMap.from_raw(raw, 1)
        path = tmp_path / "m_0001.camf"
        write_camf(path, cam, scales=[64, 96, 128])
        back, meta = read_camf(path)
        np.testing.assert_array_equal(back.raw, raw)
        assert meta["class"] == 1
        assert meta["scales"] == [64, 96, 128]
        assert meta["raw_min"] == pytest.approx(float(raw.min()))
        assert meta["raw_max"] == pytest.approx(float(raw.max()))

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.camf"
        p.write_bytes(b"JUNK" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            read_camf(p)
