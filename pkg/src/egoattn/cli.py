"""Command-line surface.

Commands: ``generate-data`` materializes a synthetic dataset, ``train`` runs
one training stage into a run directory, ``eval`` scores a checkpoint and
optionally exports attention maps and clip descriptors, and ``verify`` runs
the built-in verification suites.

Configuration is plain ``key=value`` text; command-line ``--set key=value``
overrides win over file values, unknown keys are a hard error, and the fully
resolved configuration is echoed into the run directory.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 I/O error.
"""

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from . import tensor as T
from .attention import export_attention_map
from .backbone import (BackboneConfig, BackboneNet, pretrain_backbone,
                       winning_class)
from .checkpoint import CheckpointError, load_checkpoint, restore_into, save_checkpoint
from .data import (AugmentParams, DatasetSpec, augment, read_clip,
                   generate_stills, sample_frames, write_dataset)
from .models import AppearanceModel, FlowStreamModel
from .training import (TrainConfig, evaluate, evaluate_flow, fuse_joint_train,
                       prepare_clip_flows, train_flow_stream, train_stage1,
                       train_stage2, write_confusion_csv, write_metrics_csv,
                       write_summary_json)

VERSION = "0.1.0"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# key=value configuration
# ---------------------------------------------------------------------------

_EXTRA_KEYS = {
    "model.hidden_channels": 16,
    "model.num_classes": 0,        # 0 = derive from the dataset spec
    "pretrain.per_class": 40,
    "pretrain.epochs": 20,
    "pretrain.lr": 1e-3,
}


def _known_keys():
    keys = dict(_EXTRA_KEYS)
    for prefix, cls in (("data", DatasetSpec), ("backbone", BackboneConfig),
                        ("train", TrainConfig)):
        for f in dataclasses.fields(cls):
            keys[f"{prefix}.{f.name}"] = f.default
    return keys


def _parse_value(raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        raw = raw.strip("()")
        return tuple(int(v) for v in raw.split(",") if v.strip())
    return raw


def resolve_config(path=None, overrides=()):
    """Merge defaults, an optional config file, and key=value overrides."""
    known = _known_keys()
    resolved = dict(known)
    pairs = []
    if path is not None:
        try:
            with open(path) as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{path}:{lineno}: expected key=value")
                    key, raw = line.split("=", 1)
                    pairs.append((key.strip(), raw))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        pairs.append((key.strip(), raw))
    for key, raw in pairs:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        resolved[key] = _parse_value(raw, known[key])
    return resolved


def _subset(resolved, prefix, cls):
    kv = {k.split(".", 1)[1]: v for k, v in resolved.items()
          if k.startswith(prefix + ".")}
    try:
        return cls(**kv)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {prefix} config: {exc}")


def build_configs(resolved):
    data_spec = _subset(resolved, "data", DatasetSpec)
    backbone = _subset(resolved, "backbone", BackboneConfig)
    train = _subset(resolved, "train", TrainConfig)
    num_classes = resolved["model.num_classes"] or data_spec.num_classes
    return data_spec, backbone, train, num_classes


def echo_config(resolved, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        for key in sorted(resolved):
            fh.write(f"{key}={resolved[key]}\n")
    # timestamps are confined to this single metadata line
    with open(os.path.join(out_dir, "run.meta"), "w") as fh:
        fh.write(f"egoattn {VERSION} {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------

def load_split(data_dir, split):
    split_dir = os.path.join(data_dir, split)
    if not os.path.isdir(split_dir):
        raise IOError(f"{split_dir}: split directory not found")
    clips = []
    for cls in sorted(os.listdir(split_dir)):
        cls_dir = os.path.join(split_dir, cls)
        for cid in sorted(os.listdir(cls_dir)):
            clips.append(read_clip(os.path.join(cls_dir, cid)))
    labels = [c.activity_label for c in clips]
    return clips, labels


def _require(path):
    if not os.path.exists(path):
        raise IOError(f"missing prerequisite checkpoint: {path}")
    return path


def _build_appearance(backbone_cfg, train_cfg, num_classes):
    return AppearanceModel(backbone_cfg, num_classes,
                           hidden_channels=_HIDDEN[0],
                           attention=train_cfg.attention,
                           gate_variant=train_cfg.gate_variant,
                           dropout_rate=train_cfg.dropout_rate,
                           seed=train_cfg.seed)


_HIDDEN = [16]  # set from config in cmd_train/cmd_eval


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate_data(args):
    resolved = resolve_config(args.spec, args.set or ())
    spec, _, _, _ = build_configs(resolved)
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise IOError(f"{args.out} exists and is not empty (use --force)")
    write_dataset(spec, args.out, split=args.split)
    echo_config(resolved, args.out)
    print(f"wrote dataset to {args.out}")
    return 0


def cmd_train(args):
    resolved = resolve_config(args.config, args.set or ())
    spec, backbone_cfg, train_cfg, num_classes = build_configs(resolved)
    _HIDDEN[0] = resolved["model.hidden_channels"]
    echo_config(resolved, args.out)
    rundir = args.out

    if args.stage == "pretrain":
        imgs, labs = generate_stills(spec.num_objects,
                                     resolved["pretrain.per_class"],
                                     backbone_cfg.input_size, train_cfg.seed)
        net = BackboneNet(backbone_cfg, seed=train_cfg.seed)
        history = pretrain_backbone(net, imgs, labs,
                                    epochs=resolved["pretrain.epochs"],
                                    lr=resolved["pretrain.lr"],
                                    seed=train_cfg.seed)
        save_checkpoint(os.path.join(rundir, "backbone.ckpt"), net.params)
        print(f"pretrain train_acc={history[-1][1]:.4f}")
        return 0

    clips, labels = load_split(args.data, "train")

    if args.stage in ("stage1", "stage2"):
        model = _build_appearance(backbone_cfg, train_cfg, num_classes)
        if args.stage == "stage1":
            loaded = load_checkpoint(_require(os.path.join(rundir, "backbone.ckpt")))
            restore_into(model.backbone.params, loaded, "backbone.ckpt")
            metrics = train_stage1(model, clips, labels, train_cfg)
        else:
            loaded = load_checkpoint(_require(os.path.join(rundir, "stage1.ckpt")))
            restore_into(model.params(), loaded, "stage1.ckpt")
            metrics = train_stage2(model, clips, labels, train_cfg)
        save_checkpoint(os.path.join(rundir, f"{args.stage}.ckpt"),
                        model.params())
        write_metrics_csv(metrics, os.path.join(rundir, f"metrics_{args.stage}.csv"))
        print(f"{args.stage} final train_acc={metrics.epochs[-1]['train_acc']:.4f}"
              if metrics.epochs else f"{args.stage}: zero epochs")
        return 0

    if args.stage == "flow":
        flow_cfg = dataclasses.replace(
            backbone_cfg, in_channels=10, num_pretrain_classes=num_classes)
        rgb_first = None
        bb_path = os.path.join(rundir, "backbone.ckpt")
        if os.path.exists(bb_path):
            rgb_first = load_checkpoint(bb_path)["block0.kernel"]
        model = FlowStreamModel(flow_cfg, seed=train_cfg.seed,
                                rgb_first_layer=rgb_first)
        cache = os.path.join(rundir, "flow_cache")
        os.makedirs(cache, exist_ok=True)
        flows = [prepare_clip_flows(c, variant=train_cfg.flow_variant,
                                    cache_dir=cache) for c in clips]
        metrics = train_flow_stream(model, flows, labels, train_cfg)
        save_checkpoint(os.path.join(rundir, "flow.ckpt"), model.params())
        write_metrics_csv(metrics, os.path.join(rundir, "metrics_flow.csv"))
        print(f"flow final train_acc={metrics.epochs[-1]['train_acc']:.4f}"
              if metrics.epochs else "flow: zero epochs")
        return 0

    if args.stage == "fuse":
        rgb = _build_appearance(backbone_cfg, train_cfg, num_classes)
        loaded = load_checkpoint(_require(os.path.join(rundir, "stage2.ckpt")))
        restore_into(rgb.params(), loaded, "stage2.ckpt")
        flow_cfg = dataclasses.replace(
            backbone_cfg, in_channels=10, num_pretrain_classes=num_classes)
        flow_model = FlowStreamModel(flow_cfg, seed=train_cfg.seed)
        loaded = load_checkpoint(_require(os.path.join(rundir, "flow.ckpt")))
        restore_into(flow_model.params(), loaded, "flow.ckpt")
        cache = os.path.join(rundir, "flow_cache")
        os.makedirs(cache, exist_ok=True)
        flows = [prepare_clip_flows(c, variant=train_cfg.flow_variant,
                                    cache_dir=cache) for c in clips]
        head, metrics = fuse_joint_train(rgb, flow_model, clips, flows,
                                         labels, train_cfg)
        fused = dict(rgb.params())
        fused.update({f"flowstream.{n}": t for n, t in flow_model.params().items()})
        fused.update(head.params)
        save_checkpoint(os.path.join(rundir, "fuse.ckpt"), fused)
        write_metrics_csv(metrics, os.path.join(rundir, "metrics_fuse.csv"))
        print(f"fuse final train_acc={metrics.epochs[-1]['train_acc']:.4f}"
              if metrics.epochs else "fuse: zero epochs")
        return 0

    raise ConfigError(f"unknown stage {args.stage!r}")


def cmd_eval(args):
    resolved = resolve_config(args.config, args.set or ())
    spec, backbone_cfg, train_cfg, num_classes = build_configs(resolved)
    _HIDDEN[0] = resolved["model.hidden_channels"]
    model = _build_appearance(backbone_cfg, train_cfg, num_classes)
    loaded = load_checkpoint(_require(args.checkpoint))
    restore_into(model.params(), loaded, args.checkpoint)
    clips, labels = load_split(args.data, args.split)
    metrics = evaluate(model, clips, labels, train_cfg)
    out_dir = os.path.dirname(os.path.abspath(args.checkpoint))
    write_confusion_csv(metrics.confusion,
                        os.path.join(out_dir, f"confusion_{args.split}.csv"))
    print(f"accuracy {metrics.accuracy:.4f}")

    if args.export_attention:
        os.makedirs(args.export_attention, exist_ok=True)
        size = backbone_cfg.input_size
        for clip in clips:
            frames, idx = sample_frames(clip, train_cfg.num_frames)
            batch = np.stack([augment(fr, AugmentParams(), size)
                              for fr in frames])
            _, maps = model.forward_clip(batch)
            for att, fi in zip(maps, idx):
                export_attention_map(att, args.export_attention,
                                     clip.clip_id, fi, size)
    if args.export_features:
        size = backbone_cfg.input_size
        with open(args.export_features, "w") as fh:
            for clip, lab in zip(clips, labels):
                frames, _ = sample_frames(clip, train_cfg.num_frames)
                batch = np.stack([augment(fr, AugmentParams(), size)
                                  for fr in frames])
                desc = model.clip_descriptor(batch)
                row = [clip.clip_id, str(lab)] + [f"{v:.10g}" for v in desc.data]
                fh.write(",".join(row) + "\n")
    return 0


# ---------------------------------------------------------------------------
# verification suites
# ---------------------------------------------------------------------------

def _suite_grad():
    from .convlstm import ClipClassifier, ConvLSTMCell, convlstm_step
    from .attention import apply_spatial_attention, compute_cam
    from .rng import make_rng
    checks = []
    rng = make_rng(0, "verify-grad")

    x = T.Tensor(rng.standard_normal((2, 3, 6, 6)))
    k = T.Tensor(rng.standard_normal((4, 3, 3, 3)))
    checks.append(("conv2d dx", T.grad_check(
        lambda t: T.sum_all(T.conv2d(t, k, padding=1)), x)))
    checks.append(("conv2d dk", T.grad_check(
        lambda t: T.sum_all(T.conv2d(x, t, padding=1)), k)))
    v = T.Tensor(rng.standard_normal((3, 4, 4)))
    checks.append(("spatial_softmax", T.grad_check(
        lambda t: T.sum_all(T.hadamard(T.spatial_softmax(t), t)), v)))
    checks.append(("sigmoid/tanh chain", T.grad_check(
        lambda t: T.sum_all(T.tanh(T.sigmoid(t))), v)))

    net = BackboneNet(BackboneConfig(input_size=16, channels=(3, 4),
                                     strides=(2, 2), num_pretrain_classes=3),
                      seed=0)
    cell = ConvLSTMCell(4, 4, seed=0)
    clf = ClipClassifier(4, 3, dropout_rate=0.0, seed=0)
    frames = [rng.standard_normal((3, 16, 16)) for _ in range(3)]

    def composed(t):
        state = cell.zero_state((4, 4))
        for i, base in enumerate(frames):
            frame = t if i == 0 else T.Tensor(base)
            f = net.features(frame)
            logits = T.linear(T.global_avg_pool(f), net.head_weight,
                              net.head_bias)
            cam = compute_cam(f, net.head_weight, winning_class(logits))
            state = convlstm_step(cell, apply_spatial_attention(f, cam), state)
        return T.cross_entropy(clf(T.global_avg_pool(state.c)), 1)

    checks.append(("composed frame->loss", T.grad_check(
        composed, T.Tensor(frames[0]))))
    return [(name, err, err < 1e-4) for name, err in checks]


def _suite_oracle():
    import math
    from .attention import compute_cam
    from .convlstm import ConvLSTMCell, convlstm_step
    from .rng import make_rng
    checks = []
    rng = make_rng(0, "verify-oracle")

    x = rng.standard_normal((2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    out = T.conv2d(T.Tensor(x), T.Tensor(k), padding=1).data
    loop = np.zeros_like(out)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    for c in range(3):
        for i in range(5):
            for j in range(5):
                loop[c, i, j] = (k[c] * xp[:, i:i + 3, j:j + 3]).sum()
    checks.append(("conv2d vs loop", np.abs(out - loop).max(), 1e-12))

    f = rng.standard_normal((4, 3, 3))
    w = rng.standard_normal((2, 4))
    cam = compute_cam(T.Tensor(f), T.Tensor(w), 1).data
    loop = np.einsum("l,lhw->hw", w[1], f)
    checks.append(("cam vs loop", np.abs(cam - loop).max(), 1e-12))

    gap = T.global_avg_pool(T.Tensor(f)).data
    checks.append(("gap vs mean", np.abs(gap - f.mean(axis=(1, 2))).max(), 1e-12))

    cell = ConvLSTMCell(1, 1, kernel_size=1, seed=0, forget_bias=0.0)
    for g in "ifgo":
        cell.params[f"wx_{g}"].data[...] = 1.0
        cell.params[f"wh_{g}"].data[...] = 1.0
        cell.params[f"b_{g}"].data[...] = 0.0
    st = convlstm_step(cell, T.Tensor(np.full((1, 1, 1), 0.5)),
                       cell.zero_state((1, 1)))
    sig = 1.0 / (1.0 + math.exp(-0.5))
    c_true = sig * math.tanh(0.5)
    checks.append(("scalar convlstm c", abs(float(st.c.data.reshape(())) - c_true), 1e-5))
    checks.append(("scalar gate sigma(0.5)", abs(sig - 0.62246), 1e-5))
    return [(name, err, err < tol) for name, err, tol in checks]


def _suite_flow():
    from scipy import ndimage
    from .flow import cross_modality_init, tvl1_flow, warp_compensate, FlowField
    from .rng import make_rng
    checks = []
    rng = make_rng(0, "verify-flow")
    img = 0.2 * ndimage.gaussian_filter(rng.random((64, 64)), 1)
    for s, a in [(2, 0.4), (4, 0.6), (8, 0.5)]:
        img += a * ndimage.gaussian_filter(rng.random((64, 64)), s)
    img = (img - img.min()) / (img.max() - img.min())
    moved = np.roll(np.roll(img, 1, axis=0), 3, axis=1)
    fl = tvl1_flow(img, moved)
    mee = np.hypot(fl.u[10:-10, 10:-10] - 3, fl.v[10:-10, 10:-10] - 1).mean()
    checks.append(("tvl1 translation MEE", mee, mee < 0.3))

    pan = FlowField(u=np.full((32, 32), 3.0), v=np.full((32, 32), -1.5))
    out = warp_compensate(pan)
    ratio = np.hypot(out.u, out.v).mean() / np.hypot(pan.u, pan.v).mean()
    checks.append(("warp pan reduction ratio", ratio, ratio < 0.1))

    w = rng.standard_normal((4, 3, 3, 3))
    init = cross_modality_init(w, 10)
    err = max(np.abs(init[:, ch] - w.mean(axis=1)).max() for ch in range(10))
    checks.append(("cross-modality init", err, err < 1e-15))
    return checks


def cmd_verify(args):
    suites = {"grad": _suite_grad, "oracle": _suite_oracle, "flow": _suite_flow}
    names = list(suites) if args.suite == "all" else [args.suite]
    failed = 0
    for name in names:
        for check, value, ok in suites[name]():
            status = "PASS" if ok else "FAIL"
            print(f"{status}  {name:7s}{check:32s}{value:.3e}")
            failed += 0 if ok else 1
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="egoattn")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="materialize a synthetic dataset")
    g.add_argument("--spec", help="key=value spec file")
    g.add_argument("--out", required=True)
    g.add_argument("--split", choices=("fixed", "loso"), default="fixed")
    g.add_argument("--force", action="store_true")
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config")
    t.add_argument("--stage", required=True,
                   choices=("pretrain", "stage1", "stage2", "flow", "fuse"))
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--export-attention", metavar="DIR")
    e.add_argument("--export-features", metavar="FILE")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run verification suites")
    v.add_argument("--suite", choices=("grad", "oracle", "flow", "all"),
                   default="all")
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (IOError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
