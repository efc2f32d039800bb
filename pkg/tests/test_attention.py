import numpy as np
import numpy.testing as npt
import pytest

from egoattn import tensor as T
from egoattn.attention import (AttentionMap, apply_spatial_attention,
                               attended_frame_feature, compute_cam,
                               export_attention_map, read_pgm,
                               upsample_nearest)
from egoattn.backbone import BackboneConfig, BackboneNet
from egoattn.rng import make_rng


def cam_loop(f, w, c):
    l, h, ww = f.shape
    out = np.zeros((h, ww))
    for i in range(h):
        for j in range(ww):
            out[i, j] = sum(w[c, q] * f[q, i, j] for q in range(l))
    return out


class TestComputeCam:
    def test_one_hot_row_selects_channel(self):
        f = make_rng(0, "cam").standard_normal((5, 7, 7))
        w = np.zeros((4, 5))
        w[2, 3] = 1.0
        out = compute_cam(T.Tensor(f), T.Tensor(w), 2)
        npt.assert_array_equal(out.data, f[3])

    def test_hand_arithmetic(self):
        # two channels, two locations: fibers [1,2] and [3,4], weights [10,1]
        f = np.array([[[1.0, 3.0]], [[2.0, 4.0]]])
        w = np.array([[10.0, 1.0]])
        out = compute_cam(T.Tensor(f), T.Tensor(w), 0)
        npt.assert_array_equal(out.data, [[12.0, 34.0]])

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        rng = make_rng(seed, "cam-oracle")
        f = rng.standard_normal((6, 4, 4))
        w = rng.standard_normal((3, 6))
        out = compute_cam(T.Tensor(f), T.Tensor(w), 1)
        npt.assert_allclose(out.data, cam_loop(f, w, 1), atol=1e-12)

    def test_out_of_range_class(self):
        with pytest.raises(IndexError):
            compute_cam(T.Tensor(np.zeros((2, 3, 3))), T.Tensor(np.zeros((4, 2))), 4)

    def test_batched_matches_per_sample(self):
        rng = make_rng(1, "cam-batch")
        f = rng.standard_normal((3, 6, 4, 4))
        w = rng.standard_normal((5, 6))
        cs = np.array([0, 4, 2])
        out = compute_cam(T.Tensor(f), T.Tensor(w), cs)
        for n in range(3):
            npt.assert_allclose(out.data[n], cam_loop(f[n], w, cs[n]), atol=1e-12)

    def test_gradients(self):
        rng = make_rng(2, "cam-grad")
        f = T.Tensor(rng.standard_normal((4, 3, 3)))
        w = T.Tensor(rng.standard_normal((2, 4)))
        assert T.grad_check(lambda t: T.sum_all(compute_cam(t, w, 1)), f) < 1e-6
        assert T.grad_check(lambda t: T.sum_all(compute_cam(f, t, 1)), w) < 1e-6


class TestSpatialAttention:
    def test_constant_cam_uniform_weighting(self):
        f = make_rng(0, "sa").standard_normal((3, 4, 4))
        out = apply_spatial_attention(T.Tensor(f), T.Tensor(np.full((4, 4), 2.0)))
        npt.assert_allclose(out.data, f / 16.0, atol=1e-12)

    def test_saturated_cam_masks_other_columns(self):
        f = make_rng(1, "sa").standard_normal((3, 4, 4))
        cam = np.zeros((4, 4))
        cam[1, 2] = 1000.0
        out = apply_spatial_attention(T.Tensor(f), T.Tensor(cam))
        npt.assert_allclose(out.data[:, 1, 2], f[:, 1, 2], atol=1e-9)
        others = out.data.copy()
        others[:, 1, 2] = 0.0
        assert np.abs(others).max() < 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_broadcast_loop_oracle(self, seed):
        rng = make_rng(seed, "sa-oracle")
        f = rng.standard_normal((4, 3, 3))
        cam = rng.standard_normal((3, 3))
        s = np.exp(cam - cam.max())
        s /= s.sum()
        expect = np.empty_like(f)
        for l in range(4):
            for i in range(3):
                for j in range(3):
                    expect[l, i, j] = f[l, i, j] * s[i, j]
        out = apply_spatial_attention(T.Tensor(f), T.Tensor(cam))
        npt.assert_allclose(out.data, expect, atol=1e-12)

    def test_preserves_sign_pattern(self):
        rng = make_rng(3, "sa-sign")
        f = rng.standard_normal((4, 5, 5))
        cam = rng.standard_normal((5, 5))
        out = apply_spatial_attention(T.Tensor(f), T.Tensor(cam))
        npt.assert_array_equal(np.sign(out.data), np.sign(f))

    def test_channel_sums_are_convex_combinations(self):
        rng = make_rng(4, "sa-convex")
        f = rng.standard_normal((4, 5, 5))
        cam = rng.standard_normal((5, 5))
        out = apply_spatial_attention(T.Tensor(f), T.Tensor(cam))
        per_channel = out.data.sum(axis=(1, 2))
        lo = f.min(axis=(1, 2))
        hi = f.max(axis=(1, 2))
        assert np.all(per_channel >= lo - 1e-12) and np.all(per_channel <= hi + 1e-12)

    def test_gradient_through_cam_and_attention(self):
        rng = make_rng(5, "sa-grad")
        f0 = rng.standard_normal((3, 4, 4))
        w = T.Tensor(rng.standard_normal((2, 3)))

        def path(t):
            cam = compute_cam(t, w, 0)
            return T.sum_all(T.sigmoid(apply_spatial_attention(t, cam)))

        assert T.grad_check(path, T.Tensor(f0)) < 1e-4

    def test_gradient_reaches_head_weights(self):
        rng = make_rng(6, "sa-gradw")
        f = T.Tensor(rng.standard_normal((3, 4, 4)))
        w0 = rng.standard_normal((2, 3))

        def path(t):
            cam = compute_cam(f, t, 1)
            return T.sum_all(T.tanh(apply_spatial_attention(f, cam)))

        assert T.grad_check(path, T.Tensor(w0)) < 1e-4

    def test_mismatch_raises(self):
        with pytest.raises(T.DimensionError):
            apply_spatial_attention(T.Tensor(np.zeros((2, 4, 4))),
                                    T.Tensor(np.zeros((3, 3))))


class TestAttendedFrameFeature:
    CFG = BackboneConfig(input_size=28, channels=(4, 4), strides=(2, 2),
                         num_pretrain_classes=3)

    def test_disabled_returns_features_and_uniform_map(self):
        net = BackboneNet(self.CFG, seed=0)
        frame = make_rng(0, "aff").standard_normal((3, 28, 28))
        f_sa, att = attended_frame_feature(net, T.Tensor(frame), enabled=False)
        npt.assert_allclose(att.prob, np.full((7, 7), 1 / 49))
        f, _ = f_sa, None
        # identical to the raw feature path
        raw = net.features(T.Tensor(frame))
        npt.assert_array_equal(f_sa.data, raw.data)

    def test_one_hot_head_reproducible_by_hand(self):
        net = BackboneNet(self.CFG, seed=1)
        net.head_weight.data[...] = 0.0
        net.head_weight.data[1, 2] = 1.0
        net.head_bias.data[...] = [0.0, 10.0, 0.0]
        frame = make_rng(1, "aff").standard_normal((3, 28, 28))
        f_sa, att = attended_frame_feature(net, T.Tensor(frame))
        assert att.class_used == 1
        f = net.features(T.Tensor(frame)).data
        npt.assert_allclose(att.raw, f[2], atol=1e-12)
        s = np.exp(f[2] - f[2].max())
        s /= s.sum()
        npt.assert_allclose(f_sa.data, f * s[None], atol=1e-12)

    def test_gap_changes_unless_cam_constant(self):
        net = BackboneNet(self.CFG, seed=2)
        frame = make_rng(2, "aff").standard_normal((3, 28, 28))
        f_sa, att = attended_frame_feature(net, T.Tensor(frame))
        raw = net.features(T.Tensor(frame))
        assert np.ptp(att.raw) > 0
        assert not np.allclose(f_sa.data.mean(axis=(1, 2)), raw.data.mean(axis=(1, 2)))


class TestExport:
    def test_upsample_nearest_blocks(self):
        arr = np.array([[0.0, 1.0], [2.0, 3.0]])
        up = upsample_nearest(arr, 4)
        npt.assert_array_equal(up[:2, :2], 0.0)
        npt.assert_array_equal(up[2:, 2:], 3.0)

    def test_pgm_roundtrip_and_naming(self, tmp_path):
        raw = make_rng(0, "pgm").standard_normal((7, 7))
        att = AttentionMap(raw=raw, prob=np.full((7, 7), 1 / 49), class_used=0)
        path = export_attention_map(att, tmp_path, "clip042", 7, size=28)
        assert path.endswith("clip042_7_att.pgm")
        img = read_pgm(path)
        assert img.shape == (28, 28)
        # exported bytes reconstructable from the 49 values
        norm = (raw - raw.min()) / np.ptp(raw)
        expect = np.round(upsample_nearest(norm, 28) * 255).astype(np.uint8)
        npt.assert_array_equal(img, expect)
