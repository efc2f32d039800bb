import numpy as np
import numpy.testing as npt
import pytest

from egoattn.data import (AugmentParams, DatasetSpec, SPRITES, VERBS,
                          augment, augment_box, channel_stats, draw_augment,
                          fixed_split, generate_clip, generate_stills,
                          loso_splits, make_clip, normalize_frames, read_clip,
                          sample_frames, write_clip, write_dataset)
from egoattn.rng import make_rng

SMALL = DatasetSpec(num_verbs=2, num_objects=3, clips_per_class=4,
                    frame_size=36, num_frames=28, seed=7)
FULLV = DatasetSpec(num_verbs=4, num_objects=3, clips_per_class=2,
                    frame_size=36, num_frames=28, seed=7)


class TestGeneration:
    def test_frame_shapes_and_range(self):
        clip = make_clip(SMALL, 1, 2, 0)
        assert len(clip.frames) == 28
        for fr in clip.frames:
            assert fr.shape == (3, 36, 36)
            assert fr.min() >= 0.0 and fr.max() <= 1.0

    def test_label_composition(self):
        clip = make_clip(SMALL, 1, 2, 0)
        assert clip.activity_label == 1 * SMALL.num_objects + 2
        assert clip.verb == 1 and clip.object == 2

    def test_deterministic_regeneration(self):
        a = make_clip(SMALL, 0, 1, 3)
        b = make_clip(SMALL, 0, 1, 3)
        for fa, fb in zip(a.frames, b.frames):
            npt.assert_array_equal(fa, fb)

    def test_distinct_indices_differ(self):
        a = make_clip(SMALL, 0, 1, 0)
        b = make_clip(SMALL, 0, 1, 1)
        assert any(np.abs(fa - fb).max() > 0.05
                   for fa, fb in zip(a.frames, b.frames))

    def test_motion_present(self):
        clip = make_clip(SMALL, 0, 0, 0)
        diffs = [np.abs(a - b).max() for a, b in
                 zip(clip.frames[:-1], clip.frames[1:])]
        assert max(diffs) > 0.05

    def test_take_drags_target_but_keeps_it_visible(self):
        # "take": the target ends displaced toward the corner, still in frame
        clip = make_clip(FULLV, VERBS.index("take"), 0, 0)
        assert clip.target_boxes[0] is not None
        assert clip.target_boxes[-1] is not None
        first = clip.target_boxes[0]
        last = clip.target_boxes[-1]
        dy = (last[0] + last[2]) / 2 - (first[0] + first[2]) / 2
        dx = (last[1] + last[3]) / 2 - (first[1] + first[3]) / 2
        assert dy > 5.0 and dx > 5.0

    def test_put_is_time_reversed_placement(self):
        clip = make_clip(FULLV, VERBS.index("put"), 0, 0)
        first = clip.target_boxes[0]
        last = clip.target_boxes[-1]
        dy = (first[0] + first[2]) / 2 - (last[0] + last[2]) / 2
        dx = (first[1] + first[3]) / 2 - (last[1] + last[3]) / 2
        assert dy > 5.0 and dx > 5.0

    def test_stir_keeps_target_in_place(self):
        clip = make_clip(FULLV, VERBS.index("stir"), 1, 0)
        assert all(b is not None for b in clip.target_boxes)
        centers = [((b[0] + b[2]) / 2, (b[1] + b[3]) / 2)
                   for b in clip.target_boxes]
        assert max(abs(c[1] - centers[0][1]) for c in centers) < 2.0

    def test_target_colors_present(self):
        clip = make_clip(FULLV, VERBS.index("stir"), 2, 0)
        color = np.array(SPRITES[2][1])[:, None, None]
        hit = np.abs(clip.frames[0] - color).sum(axis=0) < 0.02
        assert hit.sum() >= 9

    def test_jitter_shifts_background(self):
        spec = DatasetSpec(num_verbs=4, num_objects=3, clips_per_class=2,
                           frame_size=36, jitter_amplitude=3, seed=7)
        clip = make_clip(spec, VERBS.index("stir"), 0, 0)
        # with jitter even distant corners change between frames
        corners = [fr[:, :6, :6] for fr in clip.frames]
        assert any(np.abs(a - b).max() > 0.01
                   for a, b in zip(corners[:-1], corners[1:]))

    def test_bad_indices_rejected(self):
        rng = make_rng(0, "bad")
        with pytest.raises(ValueError):
            generate_clip(SMALL, SMALL.num_verbs, 0, rng)
        with pytest.raises(ValueError):
            generate_clip(SMALL, 0, SMALL.num_objects, rng)


class TestSplits:
    def test_fixed_split_disjoint_and_complete(self):
        train, test = fixed_split(SMALL)
        assert not set(train) & set(test)
        assert len(train) + len(test) == SMALL.num_classes * SMALL.clips_per_class

    def test_fixed_split_every_class_in_test(self):
        _, test = fixed_split(SMALL)
        classes = {cid.split("_")[0] for cid in test}
        assert len(classes) == SMALL.num_classes

    def test_loso_partitions(self):
        spec = DatasetSpec(num_verbs=2, num_objects=2, clips_per_class=10,
                           num_subseeds=5, seed=0)
        splits = loso_splits(spec)
        assert len(splits) == 5
        all_test = []
        for train, test in splits:
            assert not set(train) & set(test)
            all_test.extend(test)
        # every clip is held out exactly once across the folds
        assert len(all_test) == len(set(all_test)) == 2 * 2 * 10


class TestStills:
    def test_shapes_and_labels(self):
        imgs, labels = generate_stills(4, 3, 32, seed=0)
        assert imgs.shape == (12, 3, 32, 32)
        npt.assert_array_equal(np.bincount(labels), [3, 3, 3, 3])

    def test_deterministic(self):
        a, _ = generate_stills(3, 2, 32, seed=5)
        b, _ = generate_stills(3, 2, 32, seed=5)
        npt.assert_array_equal(a, b)

    def test_target_sprite_visible(self):
        imgs, labels = generate_stills(3, 4, 32, seed=1)
        for img, cls in zip(imgs, labels):
            color = np.array(SPRITES[cls][1])[:, None, None]
            hit = np.abs(img - color).sum(axis=0) < 0.02
            assert hit.sum() >= 5

    def test_too_many_classes(self):
        with pytest.raises(ValueError):
            generate_stills(len(SPRITES) + 1, 1, 32, seed=0)


class TestSampling:
    def test_uniform_indices(self):
        clip = make_clip(SMALL, 0, 0, 0)
        frames, idx = sample_frames(clip, 25)
        assert len(frames) == 25
        assert idx == [j * 28 // 25 for j in range(25)]
        assert idx == sorted(idx) and idx[0] == 0

    def test_exact_length_identity(self):
        clip = make_clip(SMALL, 0, 0, 0)
        _, idx = sample_frames(clip, 28)
        assert idx == list(range(28))

    def test_too_short_rejected(self):
        clip = make_clip(SMALL, 0, 0, 0)
        clip.frames = clip.frames[:10]
        with pytest.raises(ValueError):
            sample_frames(clip, 25)


class TestAugment:
    def test_eval_is_identity_crop(self):
        frame = make_rng(0, "aug").random((3, 36, 36))
        out = augment(frame, AugmentParams(), input_size=36)
        npt.assert_array_equal(out, frame)

    def test_output_size(self):
        frame = make_rng(1, "aug").random((3, 36, 36))
        for pos in ("center", "tl", "br"):
            for sc in (1.0, 0.75):
                out = augment(frame, AugmentParams(pos, sc), input_size=28)
                assert out.shape == (3, 28, 28)

    def test_flip_is_involution(self):
        frame = make_rng(2, "aug").random((3, 36, 36))
        p = AugmentParams(flip=True)
        once = augment(frame, p, 36)
        npt.assert_array_equal(once[:, :, ::-1], frame)

    def test_corner_crop_content(self):
        frame = make_rng(3, "aug").random((3, 32, 32))
        out = augment(frame, AugmentParams("tl", 0.5), input_size=16)
        npt.assert_array_equal(out, frame[:, :16, :16])

    def test_draw_eval_fixed(self):
        p = draw_augment(make_rng(0, "d"), "eval")
        assert p == AugmentParams()

    def test_draw_train_reproducible(self):
        a = draw_augment(make_rng(4, "d"), "train")
        b = draw_augment(make_rng(4, "d"), "train")
        assert a == b

    def test_box_tracks_crop_and_flip(self):
        box = (10.0, 10.0, 20.0, 20.0)
        out = augment_box(box, (36, 36), AugmentParams("tl", 1.0, flip=True), 36)
        assert out == (10.0, 16.0, 20.0, 26.0)

    def test_box_outside_crop_is_none(self):
        box = (0.0, 0.0, 4.0, 4.0)
        assert augment_box(box, (32, 32), AugmentParams("br", 0.5), 16) is None


class TestNormalization:
    def test_channel_stats_hand_value(self):
        frames = [np.zeros((3, 2, 2)), np.ones((3, 2, 2))]
        mean, std = channel_stats(frames)
        npt.assert_allclose(mean, 0.5)
        npt.assert_allclose(std, 0.5)

    def test_normalized_is_standard(self):
        frames = make_rng(0, "norm").random((10, 3, 8, 8))
        mean, std = channel_stats(frames)
        out = normalize_frames(frames, mean, std)
        npt.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        npt.assert_allclose(out.std(axis=(0, 2, 3)), 1.0, atol=1e-12)


class TestDiskFormat:
    def test_clip_roundtrip(self, tmp_path):
        clip = make_clip(SMALL, 1, 0, 2)
        write_clip(clip, tmp_path / "c")
        back = read_clip(tmp_path / "c")
        assert back.activity_label == clip.activity_label
        assert back.verb == clip.verb and back.object == clip.object
        assert len(back.frames) == len(clip.frames)
        for fa, fb in zip(clip.frames, back.frames):
            assert np.abs(fa - fb).max() <= 0.5 / 255 + 1e-9

    def test_missing_label_rejected(self, tmp_path):
        with pytest.raises(IOError):
            read_clip(tmp_path)

    def test_missing_frame_rejected(self, tmp_path):
        clip = make_clip(SMALL, 0, 0, 0)
        write_clip(clip, tmp_path / "c")
        (tmp_path / "c" / "frame_0005.ppm").unlink()
        with pytest.raises(IOError):
            read_clip(tmp_path / "c")

    def test_write_dataset_manifest(self, tmp_path):
        spec = DatasetSpec(num_verbs=2, num_objects=2, clips_per_class=4,
                           frame_size=36, seed=1)
        manifest = write_dataset(spec, tmp_path)
        assert set(manifest["splits"]) == {"train", "test"}
        ids = manifest["splits"]["train"] + manifest["splits"]["test"]
        assert len(ids) == 2 * 2 * 4
        cid = manifest["splits"]["test"][0]
        cls = spec.class_name(0)
        back = read_clip(tmp_path / "test" / cls / cid)
        assert back.clip_id == cid
