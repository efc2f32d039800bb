"""Training recipes, metrics, and evaluation.

The appearance stream trains in two stages: first only the recurrence and
activity head on a frozen backbone, then additionally the backbone's last
block and classification head so the attention maps specialize.  The flow
stream trains on one random stack per clip per epoch and evaluates on the
average of five uniformly placed stacks.  Fusion is either score averaging
or a jointly fine-tuned head over the concatenated stream descriptors.
"""

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import upsample_nearest
from .backbone import TrainingDiverged, winning_class
from .data import (AugmentParams, augment, augment_box, augment_stack,
                   draw_augment, sample_frames)
from .flow import (TVL1Params, build_flow_stack, clip_flows, to_grayscale,
                   warp_compensate)
from .optim import Adam, LrSchedule, SGD
from .rng import make_rng


def _check_milestones(milestones, epochs, label):
    ms = tuple(milestones)
    if any(b <= a for a, b in zip(ms, ms[1:])):
        raise ValueError(f"{label} milestones must be strictly increasing: {ms}")
    if ms and ms[-1] >= epochs:
        raise ValueError(f"{label} milestones {ms} exceed the {epochs}-epoch budget")


@dataclass(frozen=True)
class TrainConfig:
    """Published hyperparameters, rescalable by a desk-scale epoch factor."""
    num_frames: int = 25
    batch_size: int = 32
    epoch_factor: int = 10

    stage1_epochs: int = 200
    stage1_lr: float = 1e-3
    stage1_decay: float = 0.1
    stage1_milestones: tuple = (25, 75, 150)

    stage2_epochs: int = 150
    stage2_lr: float = 1e-4
    stage2_decay: float = 0.1
    stage2_milestones: tuple = (25, 75)

    flow_epochs: int = 750
    flow_lr: float = 1e-2
    flow_momentum: float = 0.9
    flow_decay: float = 0.5
    flow_milestones: tuple = (150, 300, 500)
    flow_max_px: float = 20.0   # clamp for flow-stack normalization

    fuse_epochs: int = 250
    fuse_lr: float = 1e-2
    fuse_momentum: float = 0.9
    fuse_decay: float = 0.1
    fuse_decay_every: int = 50   # scaled epochs between decays
    fuse_verbatim_decay: bool = False  # decay every single epoch instead

    dropout_rate: float = 0.7
    attention: bool = True
    recurrent: str = "convlstm"   # or "lrcn"
    flow_variant: str = "warp"    # or "raw"
    fusion: str = "joint"         # or "average"
    gate_variant: str = "standard"
    seed: int = 0

    def __post_init__(self):
        _check_milestones(self.stage1_milestones, self.stage1_epochs, "stage1")
        _check_milestones(self.stage2_milestones, self.stage2_epochs, "stage2")
        _check_milestones(self.flow_milestones, self.flow_epochs, "flow")
        if self.recurrent not in ("convlstm", "lrcn"):
            raise ValueError(f"unknown recurrent variant {self.recurrent!r}")
        if self.flow_variant not in ("warp", "raw"):
            raise ValueError(f"unknown flow variant {self.flow_variant!r}")
        if self.fusion not in ("average", "joint"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.epoch_factor < 1:
            raise ValueError("epoch_factor must be >= 1")

    def scale(self, n: int) -> int:
        return max(1, round(n / self.epoch_factor)) if n > 0 else 0

    def schedule(self, stage):
        """(scaled epoch count, LrSchedule) for a named stage."""
        if stage == "stage1":
            return self.scale(self.stage1_epochs), LrSchedule(
                self.stage1_lr, self.stage1_decay,
                tuple(self.scale(m) for m in self.stage1_milestones))
        if stage == "stage2":
            return self.scale(self.stage2_epochs), LrSchedule(
                self.stage2_lr, self.stage2_decay,
                tuple(self.scale(m) for m in self.stage2_milestones))
        if stage == "flow":
            return self.scale(self.flow_epochs), LrSchedule(
                self.flow_lr, self.flow_decay,
                tuple(self.scale(m) for m in self.flow_milestones))
        if stage == "fuse":
            epochs = self.scale(self.fuse_epochs)
            step = 1 if self.fuse_verbatim_decay else self.fuse_decay_every
            milestones = tuple(range(step, epochs, step))
            return epochs, LrSchedule(self.fuse_lr, self.fuse_decay, milestones)
        raise ValueError(f"unknown stage {stage!r}")


@dataclass
class Metrics:
    epochs: list = field(default_factory=list)  # dict per epoch
    confusion: np.ndarray = None                # [K,K] counts, rows = truth
    accuracy: float = None

    @property
    def per_class_accuracy(self):
        if self.confusion is None:
            return None
        totals = self.confusion.sum(axis=1)
        return np.divide(np.diag(self.confusion), totals,
                         out=np.zeros(len(totals)), where=totals > 0)

    def record(self, **kv):
        self.epochs.append(kv)


def write_metrics_csv(metrics: Metrics, path):
    if not metrics.epochs:
        open(path, "w").close()
        return
    keys = list(metrics.epochs[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(metrics.epochs)


def write_confusion_csv(confusion, path):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(confusion.tolist())


def write_summary_json(metrics: Metrics, path):
    summary = {"accuracy": metrics.accuracy,
               "epochs": len(metrics.epochs)}
    if metrics.confusion is not None:
        summary["per_class_accuracy"] = metrics.per_class_accuracy.tolist()
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def clip_batch(clips, indices, n_frames, input_size, mode, rng):
    """Stack clips into a [T,N,C,s,s] array with one augmentation draw each."""
    arrs = []
    for i in indices:
        params = draw_augment(rng, mode)
        frames, _ = sample_frames(clips[i], n_frames)
        arrs.append(augment_stack(np.asarray(frames), params, input_size))
    return np.stack(arrs, axis=1)


def _snapshot(params):
    return {n: t.data.copy() for n, t in params.items()}


def _restore(params, snap):
    for n, t in params.items():
        t.data[...] = snap[n]


def _train_epochs(model, clips, labels, epochs, sched, config, optimizer,
                  stream, val_clips=None, val_labels=None):
    """Shared mini-batch loop for the appearance-style models.

    Aborts on a non-finite loss, restoring the last epoch-end parameters.
    """
    labels = np.asarray(labels, dtype=np.intp)
    input_size = model.backbone.config.input_size
    metrics = Metrics()
    params = model.params()
    last_good = _snapshot(params)
    for epoch in range(epochs):
        lr = sched.at(epoch)
        optimizer.lr = lr
        shuffle_rng = make_rng(config.seed, stream, "shuffle", epoch)
        aug_rng = make_rng(config.seed, stream, "augment", epoch)
        drop_rng = make_rng(config.seed, stream, "dropout", epoch)
        order = shuffle_rng.permutation(len(clips))
        losses, correct = [], 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch = clip_batch(clips, idx, config.num_frames, input_size,
                               "train", aug_rng)
            logits, _ = model.forward_clip(batch, rng=drop_rng, train=True)
            loss = T.cross_entropy(logits, labels[idx])
            if not np.isfinite(loss.data):
                _restore(params, last_good)
                raise TrainingDiverged(
                    f"{stream}: loss became non-finite at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            correct += int((winning_class(logits) == labels[idx]).sum())
        record = {"epoch": epoch, "lr": lr,
                  "train_loss": float(np.mean(losses)),
                  "train_acc": correct / len(clips)}
        if val_clips is not None:
            record["val_acc"] = evaluate(model, val_clips, val_labels,
                                         config).accuracy
        metrics.record(**record)
        last_good = _snapshot(params)
    return metrics


def train_stage1(model, clips, labels, config: TrainConfig,
                 val_clips=None, val_labels=None):
    """Recurrence + activity head on a frozen backbone, Adam."""
    model.set_stage(1)
    epochs, sched = config.schedule("stage1")
    opt = Adam(model.trainable_params(), lr=sched.base)
    return _train_epochs(model, clips, labels, epochs, sched, config, opt,
                         "stage1", val_clips, val_labels)


def train_stage2(model, clips, labels, config: TrainConfig,
                 val_clips=None, val_labels=None):
    """Additionally fine-tune the last backbone block and its head."""
    model.set_stage(2)
    epochs, sched = config.schedule("stage2")
    opt = Adam(model.trainable_params(), lr=sched.base)
    return _train_epochs(model, clips, labels, epochs, sched, config, opt,
                         "stage2", val_clips, val_labels)


def evaluate(model, clips, labels, config: TrainConfig) -> Metrics:
    """Center-crop evaluation with a confusion matrix; dropout inactive."""
    labels = np.asarray(labels, dtype=np.intp)
    input_size = model.backbone.config.input_size
    k = model.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    for lo in range(0, len(clips), config.batch_size):
        idx = np.arange(lo, min(lo + config.batch_size, len(clips)))
        batch = clip_batch(clips, idx, config.num_frames, input_size,
                           "eval", rng=None)
        logits, _ = model.forward_clip(batch)
        pred = winning_class(logits)
        for t_lab, p_lab in zip(labels[idx], np.atleast_1d(pred)):
            confusion[t_lab, p_lab] += 1
    metrics = Metrics()
    metrics.confusion = confusion
    metrics.accuracy = float(np.trace(confusion) / max(confusion.sum(), 1))
    return metrics


# ---------------------------------------------------------------------------
# flow stream
# ---------------------------------------------------------------------------

def prepare_clip_flows(clip, variant="warp", params=TVL1Params(),
                       cache_dir=None):
    """Per-pair flow fields for a clip; warp variant removes global motion."""
    gray = [to_grayscale(fr) for fr in clip.frames]
    flows = clip_flows(gray, params, cache_dir=cache_dir, clip_id=clip.clip_id)
    if variant == "warp":
        flows = [warp_compensate(fl) for fl in flows]
    elif variant != "raw":
        raise ValueError(f"unknown flow variant {variant!r}")
    return flows


def flow_stack_input(flows, center, input_size, max_px=20.0):
    """Network-ready [2S,s,s] stack: build, center-crop, resize."""
    stack = build_flow_stack(flows, center, max_px=max_px)
    return augment(stack, AugmentParams(), input_size)


def uniform_stack_centers(num_flows, count=5):
    return [j * num_flows // count + num_flows // (2 * count)
            for j in range(count)]


def flow_channel_stats(clip_flow_list, input_size, max_px=20.0, count=5):
    """Per-channel mean/std over uniformly placed stacks of a clip set."""
    stacks = []
    for flows in clip_flow_list:
        for c in uniform_stack_centers(len(flows), count):
            stacks.append(flow_stack_input(flows, c, input_size, max_px))
    arr = np.stack(stacks)
    return arr.mean(axis=(0, 2, 3)), np.maximum(arr.std(axis=(0, 2, 3)), 1e-6)


def train_flow_stream(model, clip_flow_list, labels, config: TrainConfig,
                      val_flows=None, val_labels=None):
    """SGD with momentum on one randomly centered stack per clip per epoch.

    Stack statistics of the training clips are frozen into the model so the
    sparse, small-magnitude flow inputs reach the network at unit scale.
    """
    labels = np.asarray(labels, dtype=np.intp)
    input_size = model.backbone.config.input_size
    mean, std = flow_channel_stats(clip_flow_list, input_size,
                                   config.flow_max_px)
    model.set_normalization(mean, std)
    epochs, sched = config.schedule("flow")
    model.backbone.set_trainable(model.backbone.groups())
    opt = SGD(model.trainable_params(), lr=sched.base,
              momentum=config.flow_momentum)
    metrics = Metrics()
    params = model.params()
    last_good = _snapshot(params)
    for epoch in range(epochs):
        lr = sched.at(epoch)
        opt.lr = lr
        rng = make_rng(config.seed, "flow", epoch)
        order = rng.permutation(len(clip_flow_list))
        losses, correct = [], 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            stacks = []
            for i in idx:
                center = int(rng.integers(0, len(clip_flow_list[i])))
                stacks.append(flow_stack_input(clip_flow_list[i], center,
                                               input_size, config.flow_max_px))
            logits = model.forward(np.stack(stacks))
            loss = T.cross_entropy(logits, labels[idx])
            if not np.isfinite(loss.data):
                _restore(params, last_good)
                raise TrainingDiverged(
                    f"flow: loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            correct += int((winning_class(logits) == labels[idx]).sum())
        record = {"epoch": epoch, "lr": lr,
                  "train_loss": float(np.mean(losses)),
                  "train_acc": correct / len(clip_flow_list)}
        if val_flows is not None:
            record["val_acc"] = evaluate_flow(model, val_flows, val_labels,
                                              config).accuracy
        metrics.record(**record)
        last_good = _snapshot(params)
    return metrics


def flow_clip_logits(model, flows, input_size, count=5, max_px=20.0):
    stacks = [flow_stack_input(flows, c, input_size, max_px)
              for c in uniform_stack_centers(len(flows), count)]
    return model.forward_clip(stacks)


def evaluate_flow(model, clip_flow_list, labels, config: TrainConfig) -> Metrics:
    """Average the logits of 5 uniformly placed stacks per clip."""
    labels = np.asarray(labels, dtype=np.intp)
    input_size = model.backbone.config.input_size
    k = model.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    for flows, lab in zip(clip_flow_list, labels):
        logits = flow_clip_logits(model, flows, input_size,
                                  max_px=config.flow_max_px)
        confusion[lab, winning_class(logits)] += 1
    metrics = Metrics()
    metrics.confusion = confusion
    metrics.accuracy = float(np.trace(confusion) / max(confusion.sum(), 1))
    return metrics


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def fused_scores(rgb_model, flow_model, clips, clip_flow_list, config,
                 rgb_weight=0.5):
    """Average-fusion class scores per clip."""
    from .models import fuse_average
    input_size = rgb_model.backbone.config.input_size
    flow_size = flow_model.backbone.config.input_size
    scores = []
    for clip, flows in zip(clips, clip_flow_list):
        batch = clip_batch([clip], [0], config.num_frames, input_size,
                           "eval", rng=None)[:, 0]
        rgb_logits, _ = rgb_model.forward_clip(batch)
        flow_logits = flow_clip_logits(flow_model, flows, flow_size,
                                       max_px=config.flow_max_px)
        scores.append(fuse_average(rgb_logits, flow_logits, rgb_weight))
    return np.stack(scores)


def evaluate_fused(rgb_model, flow_model, clips, clip_flow_list, labels,
                   config, rgb_weight=0.5) -> Metrics:
    labels = np.asarray(labels, dtype=np.intp)
    scores = fused_scores(rgb_model, flow_model, clips, clip_flow_list,
                          config, rgb_weight)
    k = scores.shape[1]
    confusion = np.zeros((k, k), dtype=np.int64)
    for lab, row in zip(labels, scores):
        confusion[lab, int(np.argmax(row))] += 1
    metrics = Metrics()
    metrics.confusion = confusion
    metrics.accuracy = float(np.trace(confusion) / max(confusion.sum(), 1))
    return metrics


def fuse_joint_train(rgb_model, flow_model, clips, clip_flow_list, labels,
                     config: TrainConfig):
    """Concatenated-descriptor head, fine-tuning both streams' last blocks."""
    from .models import FusionHead
    labels = np.asarray(labels, dtype=np.intp)
    head = FusionHead(rgb_model.cell.hidden_channels,
                      flow_model.backbone.config.feature_channels,
                      rgb_model.num_classes, seed=config.seed)
    # warm start from the per-stream heads: the initial fused logits equal
    # the sum of the stream logits, so training starts at score-average
    # quality and can only be improved by the joint objective
    rgb_dim = rgb_model.cell.hidden_channels
    head.params["fuse.weight"].data[:, :rgb_dim] = \
        rgb_model.classifier.params["clf.weight"].data
    head.params["fuse.weight"].data[:, rgb_dim:] = \
        flow_model.backbone.head_weight.data
    head.params["fuse.bias"].data[...] = (
        rgb_model.classifier.params["clf.bias"].data
        + flow_model.backbone.head_bias.data)
    last_rgb = f"block{len(rgb_model.backbone.config.channels) - 1}"
    last_flow = f"block{len(flow_model.backbone.config.channels) - 1}"
    rgb_model.backbone.set_trainable([last_rgb])
    flow_model.backbone.set_trainable([last_flow])
    for t in rgb_model.cell.params.values():
        t.requires_grad = False
    for t in rgb_model.classifier.params.values():
        t.requires_grad = False
    trainable = {}
    trainable.update({f"rgb.{n}": t for n, t in
                      rgb_model.backbone.trainable_params().items()})
    trainable.update({f"flow.{n}": t for n, t in
                      flow_model.backbone.trainable_params().items()})
    trainable.update(head.params)
    epochs, sched = config.schedule("fuse")
    opt = SGD(trainable, lr=sched.base, momentum=config.fuse_momentum)
    input_size = rgb_model.backbone.config.input_size
    flow_size = flow_model.backbone.config.input_size
    metrics = Metrics()
    last_good = _snapshot(trainable)
    for epoch in range(epochs):
        lr = sched.at(epoch)
        opt.lr = lr
        rng = make_rng(config.seed, "fuse", epoch)
        order = rng.permutation(len(clips))
        losses, correct = [], 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch = clip_batch(clips, idx, config.num_frames, input_size,
                               "train", rng)
            rgb_desc = rgb_model.clip_descriptor(batch)
            # same 5-stack averaged flow descriptor as evaluation, so the
            # fine-tuning gradient targets the representation actually scored
            per_center = []
            for slot in range(5):
                stacks = [flow_stack_input(
                    clip_flow_list[i],
                    uniform_stack_centers(len(clip_flow_list[i]))[slot],
                    flow_size, config.flow_max_px) for i in idx]
                per_center.append(flow_model.descriptor(np.stack(stacks)))
            flow_desc = T.scale(sum_descriptors(per_center), 1.0 / 5.0)
            logits = head(rgb_desc, flow_desc)
            loss = T.cross_entropy(logits, labels[idx])
            if not np.isfinite(loss.data):
                _restore(trainable, last_good)
                raise TrainingDiverged(
                    f"fuse: loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            correct += int((winning_class(logits) == labels[idx]).sum())
        metrics.record(epoch=epoch, lr=lr,
                       train_loss=float(np.mean(losses)),
                       train_acc=correct / len(clips))
        last_good = _snapshot(trainable)
    return head, metrics


def evaluate_joint(rgb_model, flow_model, head, clips, clip_flow_list,
                   labels, config) -> Metrics:
    labels = np.asarray(labels, dtype=np.intp)
    input_size = rgb_model.backbone.config.input_size
    flow_size = flow_model.backbone.config.input_size
    k = rgb_model.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    for clip, flows, lab in zip(clips, clip_flow_list, labels):
        batch = clip_batch([clip], [0], config.num_frames, input_size,
                           "eval", rng=None)[:, 0]
        rgb_desc = rgb_model.clip_descriptor(batch)
        stacks = [flow_stack_input(flows, c, flow_size, config.flow_max_px)
                  for c in uniform_stack_centers(len(flows))]
        flow_desc = T.scale(
            sum_descriptors([flow_model.descriptor(s) for s in stacks]),
            1.0 / 5.0)
        logits = head(rgb_desc, flow_desc)
        confusion[lab, winning_class(logits)] += 1
    metrics = Metrics()
    metrics.confusion = confusion
    metrics.accuracy = float(np.trace(confusion) / max(confusion.sum(), 1))
    return metrics


def sum_descriptors(descriptors):
    total = descriptors[0]
    for d in descriptors[1:]:
        total = T.add(total, d)
    return total


# ---------------------------------------------------------------------------
# attention probes
# ---------------------------------------------------------------------------

def attention_mass_in_box(prob, box, input_size):
    """Fraction of attention probability mass inside a pixel-space box."""
    if box is None:
        return 0.0
    h = prob.shape[0]
    factor = input_size // h
    up = upsample_nearest(prob, input_size) / (factor * factor)
    y0, x0, y1, x1 = (int(round(v)) for v in box)
    return float(up[y0:y1, x0:x1].sum())


def probe_attention_mass(model, clip, config) -> float:
    """Mean attention-in-target-box mass over a clip, center-crop eval."""
    input_size = model.backbone.config.input_size
    frames, idx = sample_frames(clip, config.num_frames)
    params = AugmentParams()
    batch = np.stack([augment(fr, params, input_size) for fr in frames])
    _, maps = model.forward_clip(batch)
    shape = clip.frames[0].shape[1:]
    masses = []
    for att, fi in zip(maps, idx):
        box = augment_box(clip.target_boxes[fi], shape, params, input_size)
        if box is None:
            continue
        masses.append(attention_mass_in_box(att.prob, box, input_size))
    return float(np.mean(masses)) if masses else 0.0


def uniform_box_mass(clip, config, input_size) -> float:
    """Box-area fraction: what a uniform attention map would score."""
    _, idx = sample_frames(clip, config.num_frames)
    params = AugmentParams()
    shape = clip.frames[0].shape[1:]
    fracs = []
    for fi in idx:
        box = augment_box(clip.target_boxes[fi], shape, params, input_size)
        if box is None:
            continue
        y0, x0, y1, x1 = (int(round(v)) for v in box)
        fracs.append((y1 - y0) * (x1 - x0) / (input_size * input_size))
    return float(np.mean(fracs)) if fracs else 0.0
