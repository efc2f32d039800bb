"""Synthetic egocentric-activity videos.

Activities are verb x object composites ("take the red disc").  Each clip
renders a textured static background, the target object sprite, a number of
distractor sprites, and a hand cursor that approaches the target and executes
the verb's motion signature.  Distractors come from sprite kinds outside the
object set, so the activity is recognizable only from the target's appearance
and the motion at its location.  Optional camera jitter pans the whole view
to emulate ego-motion.

Also provides the still-image pretraining set (hand-adjacent target + sprite
label), 25-frame uniform sampling, TSN-style crop/scale/flip augmentation,
and a dependency-free PPM clip format.
"""

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .rng import make_rng

# sprite catalogue: (name, color); the first num_objects entries are usable
# as activity objects, the full set is available to stills pretraining
SPRITES = (
    ("disc", (0.95, 0.15, 0.15)),
    ("square", (0.15, 0.85, 0.20)),
    ("triangle", (0.20, 0.30, 0.95)),
    ("cross", (0.95, 0.90, 0.15)),
    ("diamond", (0.90, 0.20, 0.90)),
    ("ring", (0.15, 0.90, 0.90)),
    ("hbar", (0.95, 0.55, 0.10)),
    ("vbar", (0.55, 0.20, 0.80)),
)

VERBS = ("take", "put", "stir", "shake")

HAND_COLOR = (0.93, 0.78, 0.62)

SCALE_CHOICES = (1.0, 0.875, 0.75, 0.66)
CROP_POSITIONS = ("center", "tl", "tr", "bl", "br")


@dataclass
class VideoClip:
    frames: list                 # [3,H,W] float arrays in [0,1]
    activity_label: int
    verb: int
    object: int
    clip_id: str
    fps: float = 15.0
    target_boxes: list = field(default_factory=list)  # (y0,x0,y1,x1) or None


@dataclass(frozen=True)
class DatasetSpec:
    num_verbs: int = 4
    num_objects: int = 6
    clips_per_class: int = 20
    distractors: int = 3
    frame_size: int = 36
    num_frames: int = 28
    jitter_amplitude: int = 0    # max |camera pan| in px per axis
    seed: int = 0
    num_subseeds: int = 5        # "subjects" for leave-one-subseed-out

    @property
    def num_classes(self) -> int:
        return self.num_verbs * self.num_objects

    def activity_label(self, verb: int, obj: int) -> int:
        return verb * self.num_objects + obj

    def class_name(self, label: int) -> str:
        verb, obj = divmod(label, self.num_objects)
        return f"{VERBS[verb % len(VERBS)]}_{SPRITES[obj][0]}"


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _background(size, rng):
    img = np.zeros((3, size, size))
    for c in range(3):
        layer = 0.5 * ndimage.gaussian_filter(rng.random((size, size)), 2)
        layer += 0.5 * ndimage.gaussian_filter(rng.random((size, size)), 5)
        lo, hi = layer.min(), layer.max()
        img[c] = 0.25 + 0.35 * (layer - lo) / max(hi - lo, 1e-9)
    return img


def _sprite_mask(kind, r):
    """Boolean mask of a sprite of 'radius' r on a (2r+1)^2 patch."""
    n = 2 * r + 1
    yy, xx = np.meshgrid(np.arange(n) - r, np.arange(n) - r, indexing="ij")
    d = np.hypot(yy, xx)
    if kind == "disc":
        return d <= r
    if kind == "square":
        return (np.abs(yy) <= r - 1) & (np.abs(xx) <= r - 1)
    if kind == "triangle":
        return (yy >= -r + 1) & (np.abs(xx) <= (yy + r) / 2)
    if kind == "cross":
        return (np.abs(yy) <= max(r // 3, 1)) | (np.abs(xx) <= max(r // 3, 1))
    if kind == "diamond":
        return np.abs(yy) + np.abs(xx) <= r
    if kind == "ring":
        return (d <= r) & (d >= r - max(r // 2, 1))
    if kind == "hbar":
        return np.abs(yy) <= max(r // 3, 1)
    if kind == "vbar":
        return np.abs(xx) <= max(r // 3, 1)
    raise ValueError(f"unknown sprite kind {kind!r}")


def _paint(canvas, mask, color, cy, cx):
    """Blend a sprite mask centered at (cy,cx) into a [3,H,W] canvas."""
    r = mask.shape[0] // 2
    h, w = canvas.shape[1:]
    y0, y1 = cy - r, cy + r + 1
    x0, x1 = cx - r, cx + r + 1
    my0, mx0 = max(0, -y0), max(0, -x0)
    y0, x0 = max(0, y0), max(0, x0)
    y1, x1 = min(h, y1), min(w, x1)
    if y1 <= y0 or x1 <= x0:
        return
    sub = mask[my0:my0 + (y1 - y0), mx0:mx0 + (x1 - x0)]
    for c in range(3):
        canvas[c, y0:y1, x0:x1][sub] = color[c]


def _paint_hand(canvas, cy, cx, r=2):
    _paint(canvas, _sprite_mask("disc", r), HAND_COLOR, cy, cx)


def _verb_trajectory(verb_name, t_norm, start, rng):
    """Target (dy,dx) offset and hand offset relative to target, both in px,
    as functions of normalized time in [0,1]."""
    # per-frame displacements stay below ~3 px so optical flow can track them
    if verb_name == "take":
        # grasp, then drag toward the lower-right corner (stays in frame, so
        # only the spatial trajectory separates this from "put")
        move = max(0.0, (t_norm - 0.4) / 0.55)
        return (move * 8.0, move * 8.0), (1.0, -1.0)
    if verb_name == "put":
        # enter displaced toward the corner, deposit at the start position
        move = max(0.0, (0.45 - t_norm) / 0.45)
        return (move * 8.0, move * 8.0), (1.0, -1.0) if t_norm < 0.7 else (8.0, -6.0)
    if verb_name == "stir":
        ang = 2.0 * np.pi * 1.5 * t_norm
        return (0.0, 0.0), (1.6 * np.sin(ang), 1.6 * np.cos(ang))
    if verb_name == "shake":
        osc = 2.5 * np.sin(2.0 * np.pi * 3.0 * t_norm)
        phase = min(1.0, t_norm / 0.3)
        return (0.0, phase * osc), (1.0, -1.0)
    raise ValueError(f"unknown verb {verb_name!r}")


def generate_clip(spec: DatasetSpec, verb: int, obj: int, rng,
                  clip_id: str = "clip") -> VideoClip:
    """Render one activity clip; deterministic given the rng state."""
    if not 0 <= verb < spec.num_verbs:
        raise ValueError(f"verb {verb} out of range [0, {spec.num_verbs})")
    if not 0 <= obj < spec.num_objects:
        raise ValueError(f"object {obj} out of range [0, {spec.num_objects})")
    size = spec.frame_size
    margin = 8 + spec.jitter_amplitude
    world = size + 2 * margin
    r = max(size // 10, 3)
    bg = _background(world, rng)

    # target position near the view center
    ty = margin + size // 2 + int(rng.integers(-size // 6, size // 6 + 1))
    tx = margin + size // 2 + int(rng.integers(-size // 6, size // 6 + 1))

    # distractors: sprite kinds outside the object set, so the target is the
    # only object-class sprite in the scene (falls back to other object kinds
    # when the object set uses the whole catalogue)
    others = (list(range(spec.num_objects, len(SPRITES)))
              or [k for k in range(spec.num_objects) if k != obj])
    distractors = []
    for _ in range(spec.distractors):
        kind = int(rng.choice(others))
        for _attempt in range(50):
            dy = margin + int(rng.integers(r, size - r))
            dx = margin + int(rng.integers(r, size - r))
            if abs(dy - ty) + abs(dx - tx) > 3 * r:
                break
        distractors.append((kind, dy, dx))

    # camera jitter: bounded integer random walk
    jy = jx = 0
    jitter = []
    for _ in range(spec.num_frames):
        if spec.jitter_amplitude > 0:
            jy = int(np.clip(jy + rng.integers(-1, 2), -spec.jitter_amplitude,
                             spec.jitter_amplitude))
            jx = int(np.clip(jx + rng.integers(-1, 2), -spec.jitter_amplitude,
                             spec.jitter_amplitude))
        jitter.append((jy, jx))

    verb_name = VERBS[verb % len(VERBS)]
    hand_entry = (margin + size - 2, margin + size - 2)
    frames, boxes = [], []
    for t in range(spec.num_frames):
        t_norm = t / max(spec.num_frames - 1, 1)
        canvas = bg.copy()
        for kind, dy, dx in distractors:
            _paint(canvas, _sprite_mask(SPRITES[kind][0], r), SPRITES[kind][1], dy, dx)

        (ody, odx), (hdy, hdx) = _verb_trajectory(verb_name, t_norm, (ty, tx), rng)
        cy, cx = int(round(ty + ody)), int(round(tx + odx))
        _paint(canvas, _sprite_mask(SPRITES[obj][0], r), SPRITES[obj][1], cy, cx)

        # hand approaches during the first 40%, then follows the verb offset
        if t_norm < 0.4:
            a = t_norm / 0.4
            hy = int(round(hand_entry[0] * (1 - a) + (cy + r + 1) * a))
            hx = int(round(hand_entry[1] * (1 - a) + (cx - r - 1) * a))
        else:
            hy, hx = int(round(cy + r * hdy)), int(round(cx + r * hdx))
        _paint_hand(canvas, hy, hx)

        jy, jx = jitter[t]
        view = canvas[:, margin + jy:margin + jy + size,
                      margin + jx:margin + jx + size]
        frames.append(view.copy())

        # target box in view coordinates, None when fully outside
        y0 = cy - r - (margin + jy)
        x0 = cx - r - (margin + jx)
        y1, x1 = y0 + 2 * r + 1, x0 + 2 * r + 1
        y0c, x0c = max(0, y0), max(0, x0)
        y1c, x1c = min(size, y1), min(size, x1)
        boxes.append((y0c, x0c, y1c, x1c) if (y1c > y0c and x1c > x0c) else None)

    return VideoClip(frames=frames, activity_label=spec.activity_label(verb, obj),
                     verb=verb, object=obj, clip_id=clip_id,
                     target_boxes=boxes)


def make_clip(spec: DatasetSpec, verb: int, obj: int, index: int) -> VideoClip:
    """Deterministic clip for (spec.seed, verb, object, index)."""
    rng = make_rng(spec.seed, "clip", verb, obj, index)
    clip_id = f"v{verb}o{obj}_{index:03d}"
    return generate_clip(spec, verb, obj, rng, clip_id=clip_id)


def generate_dataset(spec: DatasetSpec):
    """All clips, exactly clips_per_class per (verb, object)."""
    clips = []
    for verb in range(spec.num_verbs):
        for obj in range(spec.num_objects):
            for i in range(spec.clips_per_class):
                clips.append(make_clip(spec, verb, obj, i))
    return clips


def fixed_split(spec: DatasetSpec):
    """Deterministic split: every 4th clip index per class is test."""
    train, test = [], []
    for verb in range(spec.num_verbs):
        for obj in range(spec.num_objects):
            for i in range(spec.clips_per_class):
                cid = f"v{verb}o{obj}_{i:03d}"
                (test if i % 4 == 0 else train).append(cid)
    return train, test


def loso_splits(spec: DatasetSpec):
    """Leave-one-subseed-out: clips grouped by index % num_subseeds."""
    splits = []
    for held in range(spec.num_subseeds):
        train, test = [], []
        for verb in range(spec.num_verbs):
            for obj in range(spec.num_objects):
                for i in range(spec.clips_per_class):
                    cid = f"v{verb}o{obj}_{i:03d}"
                    (test if i % spec.num_subseeds == held else train).append(cid)
        splits.append((train, test))
    return splits


# ---------------------------------------------------------------------------
# still-image pretraining set
# ---------------------------------------------------------------------------

def generate_stills(num_classes, per_class, size, seed, distractors=2):
    """Hand-adjacent sprite scenes for backbone pretraining.

    The label is the object sprite in the scene; distractors come from the
    non-object sprite kinds, so a net that learns the object classes yields
    CAMs localizing the manipulated object in activity clips.
    Returns (images [N,3,size,size], labels [N]).
    """
    if num_classes > len(SPRITES):
        raise ValueError(f"at most {len(SPRITES)} sprite classes available")
    images, labels = [], []
    r = max(size // 10, 3)
    for cls in range(num_classes):
        for i in range(per_class):
            rng = make_rng(seed, "still", cls, i)
            canvas = _background(size, rng)
            ty = int(rng.integers(r + 1, size - r - 1))
            tx = int(rng.integers(r + 1, size - r - 1))
            others = (list(range(num_classes, len(SPRITES)))
                      or [k for k in range(num_classes) if k != cls])
            for _ in range(distractors):
                kind = int(rng.choice(others))
                for _attempt in range(50):
                    dy = int(rng.integers(r, size - r))
                    dx = int(rng.integers(r, size - r))
                    if abs(dy - ty) + abs(dx - tx) > 3 * r:
                        break
                _paint(canvas, _sprite_mask(SPRITES[kind][0], r),
                       SPRITES[kind][1], dy, dx)
            _paint(canvas, _sprite_mask(SPRITES[cls][0], r), SPRITES[cls][1], ty, tx)
            side = int(rng.integers(0, 4))
            off = [(0, r + 2), (0, -r - 2), (r + 2, 0), (-r - 2, 0)][side]
            _paint_hand(canvas, ty + off[0], tx + off[1])
            images.append(canvas)
            labels.append(cls)
    return np.array(images), np.array(labels, dtype=np.intp)


# ---------------------------------------------------------------------------
# sampling and augmentation
# ---------------------------------------------------------------------------

def sample_frames(clip: VideoClip, n: int = 25):
    """Uniform temporal sampling: indices floor(j*T/n) for j = 0..n-1."""
    t = len(clip.frames)
    if t < n:
        raise ValueError(f"clip has {t} frames, need at least {n}")
    idx = [j * t // n for j in range(n)]
    return [clip.frames[i] for i in idx], idx


@dataclass(frozen=True)
class AugmentParams:
    position: str = "center"   # one of CROP_POSITIONS
    scale: float = 1.0         # fraction of the short side
    flip: bool = False


def draw_augment(rng, mode: str) -> AugmentParams:
    """One clip-level augmentation draw (all frames share it)."""
    if mode == "eval":
        return AugmentParams()
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return AugmentParams(position=CROP_POSITIONS[int(rng.integers(0, 5))],
                         scale=SCALE_CHOICES[int(rng.integers(0, 4))],
                         flip=bool(rng.random() < 0.5))


def _crop_region(h, w, params: AugmentParams):
    side = int(round(min(h, w) * params.scale))
    pos = {
        "center": ((h - side) // 2, (w - side) // 2),
        "tl": (0, 0),
        "tr": (0, w - side),
        "bl": (h - side, 0),
        "br": (h - side, w - side),
    }[params.position]
    return pos[0], pos[1], side


def _resize_nearest(frame, out_size):
    c, h, w = frame.shape
    yi = (np.arange(out_size) * h // out_size).astype(np.intp)
    xi = (np.arange(out_size) * w // out_size).astype(np.intp)
    return frame[:, yi[:, None], xi[None, :]]


def augment(frame, params: AugmentParams, input_size: int):
    """Crop + nearest-neighbor resize + optional horizontal flip."""
    h, w = frame.shape[1:]
    y0, x0, side = _crop_region(h, w, params)
    out = _resize_nearest(frame[:, y0:y0 + side, x0:x0 + side], input_size)
    if params.flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_stack(frames, params: AugmentParams, input_size: int):
    """`augment` applied to a whole [T,C,H,W] stack sharing one draw."""
    h, w = frames.shape[2:]
    y0, x0, side = _crop_region(h, w, params)
    crop = frames[:, :, y0:y0 + side, x0:x0 + side]
    yi = (np.arange(input_size) * side // input_size).astype(np.intp)
    xi = (np.arange(input_size) * side // input_size).astype(np.intp)
    out = crop[:, :, yi[:, None], xi[None, :]]
    if params.flip:
        out = out[:, :, :, ::-1]
    return np.ascontiguousarray(out)


def augment_box(box, frame_shape, params: AugmentParams, input_size: int):
    """Map a target box through the same crop/resize/flip as `augment`."""
    if box is None:
        return None
    h, w = frame_shape
    y0c, x0c, side = _crop_region(h, w, params)
    sc = input_size / side
    y0 = (box[0] - y0c) * sc
    x0 = (box[1] - x0c) * sc
    y1 = (box[2] - y0c) * sc
    x1 = (box[3] - x0c) * sc
    if params.flip:
        x0, x1 = input_size - x1, input_size - x0
    y0, x0 = max(0.0, y0), max(0.0, x0)
    y1, x1 = min(float(input_size), y1), min(float(input_size), x1)
    if y1 <= y0 or x1 <= x0:
        return None
    return (y0, x0, y1, x1)


def channel_stats(frames):
    """Per-channel mean/std over a list or array of [3,H,W] frames."""
    stacked = np.stack(frames) if isinstance(frames, list) else np.asarray(frames)
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    return mean, np.maximum(std, 1e-6)


def normalize_frames(frames, mean, std):
    return (np.asarray(frames) - mean[:, None, None]) / std[:, None, None]


# ---------------------------------------------------------------------------
# on-disk clip format
# ---------------------------------------------------------------------------

def _write_ppm(path, frame):
    """8-bit binary PPM (P6) from a [3,H,W] float frame in [0,1]."""
    arr = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.moveaxis(arr, 0, 2).tobytes())


def _read_ppm(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P6":
            raise IOError(f"{path}: not a binary PPM file")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        fh.readline()
        raw = np.frombuffer(fh.read(), dtype=np.uint8)
    if raw.size != 3 * h * w:
        raise IOError(f"{path}: expected {3 * h * w} bytes, found {raw.size}")
    return np.moveaxis(raw.reshape(h, w, 3), 2, 0).astype(np.float64) / 255.0


def write_clip(clip: VideoClip, directory):
    os.makedirs(directory, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        _write_ppm(os.path.join(directory, f"frame_{i:04d}.ppm"), frame)
    with open(os.path.join(directory, "label.txt"), "w") as fh:
        fh.write(f"verb {clip.verb}\n")
        fh.write(f"object {clip.object}\n")
        fh.write(f"activity {clip.activity_label}\n")
        fh.write(f"frames {len(clip.frames)}\n")


def read_clip(directory) -> VideoClip:
    label_path = os.path.join(directory, "label.txt")
    if not os.path.exists(label_path):
        raise IOError(f"{label_path}: missing label file")
    fields = {}
    with open(label_path) as fh:
        for line in fh:
            parts = line.split()
            if len(parts) == 2:
                fields[parts[0]] = int(parts[1])
    for key in ("verb", "object", "activity", "frames"):
        if key not in fields:
            raise IOError(f"{label_path}: missing field {key!r}")
    frames = []
    for i in range(fields["frames"]):
        path = os.path.join(directory, f"frame_{i:04d}.ppm")
        if not os.path.exists(path):
            raise IOError(f"{path}: missing frame file")
        frames.append(_read_ppm(path))
    return VideoClip(frames=frames, activity_label=fields["activity"],
                     verb=fields["verb"], object=fields["object"],
                     clip_id=os.path.basename(os.path.normpath(directory)))


def write_dataset(spec: DatasetSpec, root, split="fixed"):
    """Materialize the directory layout plus a manifest.json index."""
    clips = {c.clip_id: c for c in generate_dataset(spec)}
    if split == "fixed":
        splits = {"train": fixed_split(spec)[0], "test": fixed_split(spec)[1]}
    elif split == "loso":
        splits = {}
        for held, (train, test) in enumerate(loso_splits(spec)):
            splits[f"loso{held}_train"] = train
            splits[f"loso{held}_test"] = test
    else:
        raise ValueError(f"unknown split policy {split!r}")
    for split_name, ids in splits.items():
        for cid in ids:
            clip = clips[cid]
            cls = spec.class_name(clip.activity_label)
            write_clip(clip, os.path.join(root, split_name, cls, cid))
    manifest = {"spec": {"num_verbs": spec.num_verbs,
                         "num_objects": spec.num_objects,
                         "clips_per_class": spec.clips_per_class,
                         "frame_size": spec.frame_size,
                         "num_frames": spec.num_frames,
                         "jitter_amplitude": spec.jitter_amplitude,
                         "seed": spec.seed},
                "splits": {name: sorted(ids) for name, ids in splits.items()}}
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest
