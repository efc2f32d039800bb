import numpy as np
import numpy.testing as npt
import pytest

from egoattn import tensor as T
from egoattn.backbone import BackboneConfig
from egoattn.models import (AppearanceModel, FlowStreamModel, FusionHead,
                            LRCNModel, fuse_average, softmax_scores)
from egoattn.rng import make_rng

CFG = BackboneConfig(input_size=16, channels=(4, 6), strides=(2, 2),
                     num_pretrain_classes=3)
FLOW_CFG = BackboneConfig(input_size=16, channels=(4, 6), strides=(2, 2),
                          num_pretrain_classes=5, in_channels=10)


def clip_frames(t=3, batch=None, seed=0):
    rng = make_rng(seed, "frames")
    shape = (t, 3, 16, 16) if batch is None else (t, batch, 3, 16, 16)
    return rng.random(shape)


class TestAppearanceModel:
    def test_logit_shape(self):
        model = AppearanceModel(CFG, num_classes=5, hidden_channels=4, seed=0)
        logits, maps = model.forward_clip(clip_frames())
        assert logits.data.shape == (5,)
        assert len(maps) == 3
        assert maps[0].prob.shape == (4, 4)

    def test_batched_matches_per_clip(self):
        model = AppearanceModel(CFG, num_classes=4, hidden_channels=4, seed=1)
        frames = clip_frames(t=2, batch=3, seed=1)
        batched, _ = model.forward_clip(frames)
        for n in range(3):
            single, _ = model.forward_clip(frames[:, n])
            npt.assert_allclose(batched.data[n], single.data, atol=1e-10)

    def test_attention_off_differs(self):
        on = AppearanceModel(CFG, 4, hidden_channels=4, attention=True, seed=2)
        off = AppearanceModel(CFG, 4, hidden_channels=4, attention=False, seed=2)
        frames = clip_frames(seed=2)
        a, maps_on = on.forward_clip(frames)
        b, maps_off = off.forward_clip(frames)
        assert np.abs(a.data - b.data).max() > 1e-8
        assert maps_off[0].class_used == -1
        npt.assert_allclose(maps_off[0].prob, 1 / 16)

    def test_stage1_freezes_backbone(self):
        model = AppearanceModel(CFG, 4, hidden_channels=4, seed=3)
        model.set_stage(1)
        names = set(model.trainable_params())
        assert not any(n.startswith("backbone.") for n in names)
        assert any(n.startswith("lstm.") for n in names)
        assert any(n.startswith("head.") for n in names)

    def test_stage2_unfreezes_last_block_and_head(self):
        model = AppearanceModel(CFG, 4, hidden_channels=4, seed=3)
        model.set_stage(2)
        names = set(model.trainable_params())
        assert "backbone.block1.kernel" in names
        assert "backbone.head.weight" in names
        assert "backbone.block0.kernel" not in names

    def test_normalization_applied(self):
        model = AppearanceModel(CFG, 4, hidden_channels=4, seed=4)
        frames = clip_frames(seed=4)
        base, _ = model.forward_clip(frames)
        model.set_normalization(np.full(3, 0.5), np.full(3, 2.0))
        shifted, _ = model.forward_clip(frames)
        assert np.abs(base.data - shifted.data).max() > 1e-8
        equiv, _ = AppearanceModel(CFG, 4, hidden_channels=4, seed=4) \
            .forward_clip((frames - 0.5) / 2.0)
        npt.assert_allclose(shifted.data, equiv.data, atol=1e-12)

    def test_stats_travel_in_params(self):
        model = AppearanceModel(CFG, 4, hidden_channels=4, seed=0)
        params = model.params()
        assert not params["norm.mean"].requires_grad
        assert not params["norm.std"].requires_grad

    def test_end_to_end_gradient(self):
        model = AppearanceModel(CFG, 3, hidden_channels=2, dropout_rate=0.0,
                                seed=5)
        model.set_stage(2)
        frames = clip_frames(t=2, seed=5)
        w = model.cell.params["wx_g"]

        def loss_of(t):
            model.cell.params["wx_g"] = t
            logits, _ = model.forward_clip(frames)
            return T.cross_entropy(logits, 1)

        try:
            assert T.grad_check(loss_of, T.Tensor(w.data.copy())) < 1e-4
        finally:
            model.cell.params["wx_g"] = w


class TestLRCN:
    def test_logit_shape_and_no_maps(self):
        model = LRCNModel(CFG, num_classes=5, hidden_dim=4, seed=0)
        logits, maps = model.forward_clip(clip_frames())
        assert logits.data.shape == (5,)
        assert maps == []

    def test_batched_matches_per_clip(self):
        model = LRCNModel(CFG, 4, hidden_dim=4, seed=1)
        frames = clip_frames(t=2, batch=2, seed=6)
        batched, _ = model.forward_clip(frames)
        for n in range(2):
            single, _ = model.forward_clip(frames[:, n])
            npt.assert_allclose(batched.data[n], single.data, atol=1e-10)

    def test_gradient_through_recurrence(self):
        model = LRCNModel(CFG, 3, hidden_dim=3, dropout_rate=0.0, seed=2)
        model.set_stage(1)
        frames = clip_frames(t=2, seed=7)
        w = model.cell.params["wx_g"]

        def loss_of(t):
            model.cell.params["wx_g"] = t
            logits, _ = model.forward_clip(frames)
            return T.cross_entropy(logits, 0)

        try:
            assert T.grad_check(loss_of, T.Tensor(w.data.copy())) < 1e-4
        finally:
            model.cell.params["wx_g"] = w


class TestFlowStream:
    def test_logits_shape(self):
        model = FlowStreamModel(FLOW_CFG, seed=0)
        stack = make_rng(0, "stack").random((10, 16, 16))
        assert model.forward(stack).data.shape == (5,)

    def test_clip_average_is_mean_of_stack_logits(self):
        model = FlowStreamModel(FLOW_CFG, seed=1)
        rng = make_rng(1, "stacks")
        stacks = [rng.random((10, 16, 16)) for _ in range(3)]
        avg = model.forward_clip(stacks)
        direct = np.mean([model.forward(s).data for s in stacks], axis=0)
        npt.assert_allclose(avg.data, direct, atol=1e-12)

    def test_cross_modality_first_layer(self):
        rgb = make_rng(2, "rgb").standard_normal((4, 3, 3, 3))
        model = FlowStreamModel(FLOW_CFG, seed=2, rgb_first_layer=rgb)
        k = model.backbone.params["block0.kernel"].data
        npt.assert_allclose(k[:, 0], rgb.mean(axis=1), atol=1e-15)
        for ch in range(1, 10):
            npt.assert_array_equal(k[:, ch], k[:, 0])

    def test_empty_clip_rejected(self):
        with pytest.raises(ValueError):
            FlowStreamModel(FLOW_CFG, seed=0).forward_clip([])


class TestFusion:
    def test_scores_sum_to_one(self):
        s = softmax_scores(np.array([1.0, 2.0, 3.0]))
        assert s.sum() == pytest.approx(1.0)

    def test_average_hand_values(self):
        npt.assert_array_equal(
            fuse_average(np.array([2.0, 0.0]), np.array([0.0, 2.0])),
            [1.0, 1.0])
        same = np.array([3.0, -1.0, 0.5])
        npt.assert_array_equal(fuse_average(same, same), same)

    def test_weight_one_ignores_flow(self):
        a = np.array([1.0, -1.0])
        npt.assert_allclose(fuse_average(a, np.array([5.0, 5.0]), 1.0), a)

    def test_average_argmax_can_differ_from_both_streams(self):
        # search small integer logit grids for a witness
        found = False
        for a2 in range(4):
            for b2 in range(4):
                a = np.array([3.0, 0.0, float(a2)])
                b = np.array([0.0, 3.0, float(b2)])
                f = fuse_average(a, b)
                if (np.argmax(f) != np.argmax(a)
                        and np.argmax(f) != np.argmax(b)):
                    found = True
        assert found

    def test_bad_weight_and_shape(self):
        with pytest.raises(ValueError):
            fuse_average(np.zeros(2), np.zeros(2), 1.5)
        with pytest.raises(T.DimensionError):
            fuse_average(np.zeros(2), np.zeros(3))

    def test_fusion_head_shapes_and_gradient(self):
        head = FusionHead(rgb_dim=3, flow_dim=2, num_classes=4, seed=0)
        rng = make_rng(3, "fuse")
        r = rng.standard_normal(3)
        f = rng.standard_normal(2)
        logits = head(T.Tensor(r), T.Tensor(f))
        assert logits.data.shape == (4,)
        w = head.params["fuse.weight"]

        def loss_of(t):
            head.params["fuse.weight"] = t
            return T.cross_entropy(head(T.Tensor(r), T.Tensor(f)), 2)

        try:
            assert T.grad_check(loss_of, T.Tensor(w.data.copy())) < 1e-6
        finally:
            head.params["fuse.weight"] = w
