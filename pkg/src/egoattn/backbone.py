"""MiniNet: a small CNN with the GAP + linear-head structure that class
activation maps require.

Each block is a strided 3x3 convolution followed by ReLU; the final block
emits the feature map whose channel fibers are dotted with a head-weight row
to form a CAM.  Stands in for a large pretrained backbone at desk scale.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .optim import Adam
from .rng import make_rng


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 112
    channels: tuple = (16, 32, 64, 64)
    strides: tuple = (2, 2, 2, 2)
    num_pretrain_classes: int = 8
    in_channels: int = 3
    kernel_size: int = 3

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    @property
    def final_side(self) -> int:
        side = self.input_size
        total = 1
        for s in self.strides:
            total *= s
        if self.input_size % total:
            raise ValueError(
                f"input_size {self.input_size} not divisible by stride product {total}"
            )
        side = self.input_size // total
        if side < 2:
            raise ValueError(f"final spatial side {side} < 2")
        return side

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have equal length")
        self.final_side  # validate geometry eagerly


class BackboneNet:
    """Conv blocks + GAP + linear head; parameter groups are freezable."""

    def __init__(self, config: BackboneConfig, seed: int = 0):
        self.config = config
        self.params = {}
        rng = make_rng(seed, "backbone-init")
        cin = config.in_channels
        k = config.kernel_size
        for i, cout in enumerate(config.channels):
            fan_in = cin * k * k
            bound = np.sqrt(6.0 / fan_in)  # He-uniform for ReLU stacks
            self.params[f"block{i}.kernel"] = T.parameter(
                rng.uniform(-bound, bound, (cout, cin, k, k)))
            self.params[f"block{i}.bias"] = T.parameter(np.zeros(cout))
            cin = cout
        l = config.feature_channels
        bound = np.sqrt(6.0 / l)
        self.params["head.weight"] = T.parameter(
            rng.uniform(-bound, bound, (config.num_pretrain_classes, l)))
        self.params["head.bias"] = T.parameter(np.zeros(config.num_pretrain_classes))

    @property
    def head_weight(self):
        return self.params["head.weight"]

    @property
    def head_bias(self):
        return self.params["head.bias"]

    def groups(self):
        names = [f"block{i}" for i in range(len(self.config.channels))]
        return names + ["head"]

    def set_trainable(self, groups):
        """Mark exactly the given parameter groups trainable; others frozen."""
        groups = set(groups)
        unknown = groups - set(self.groups())
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        for name, t in self.params.items():
            t.requires_grad = name.split(".")[0] in groups

    def trainable_params(self):
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def features(self, frame):
        """Final feature map f for a [C,s,s] frame or [N,C,s,s] batch."""
        cfg = self.config
        expect = (cfg.in_channels, cfg.input_size, cfg.input_size)
        shape = frame.shape if isinstance(frame, T.Tensor) else np.shape(frame)
        if tuple(shape[-3:]) != expect:
            raise T.DimensionError(
                f"backbone expects trailing axes {expect}, got {tuple(shape[-3:])}"
            )
        x = T.as_tensor(frame)
        for i, stride in enumerate(cfg.strides):
            x = T.conv2d(x, self.params[f"block{i}.kernel"],
                         self.params[f"block{i}.bias"],
                         stride=stride, padding=cfg.kernel_size // 2)
            x = T.relu(x)
        return x


def backbone_forward(net: BackboneNet, frame):
    """Feature map plus head logits: logits = linear(GAP(f), W, b)."""
    f = net.features(frame)
    logits = T.linear(T.global_avg_pool(f), net.head_weight, net.head_bias)
    return f, logits


def winning_class(logits) -> int:
    """Argmax class; ties break toward the lowest index."""
    data = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    if data.ndim == 1:
        return int(np.argmax(data))
    return np.argmax(data, axis=-1)


def pretrain_backbone(net, images, labels, epochs, lr=1e-3, batch_size=32,
                      seed=0, val_images=None, val_labels=None):
    """Supervised pretraining on still images; the generic-recognition prior.

    Trains all parameter groups with Adam + cross-entropy.  Returns per-epoch
    (train_loss, train_acc, val_acc) tuples; val_acc is None without a
    validation set.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    net.set_trainable(net.groups())
    opt = Adam(net.trainable_params(), lr=lr)
    rng = make_rng(seed, "pretrain-shuffle")
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        losses, correct = [], 0
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            f, logits = backbone_forward(net, T.Tensor(images[idx]))
            loss = T.cross_entropy(logits, labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"pretraining loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            correct += int((winning_class(logits) == labels[idx]).sum())
        val_acc = None
        if val_images is not None:
            val_acc = classify_accuracy(net, val_images, val_labels)
        history.append((float(np.mean(losses)), correct / len(images), val_acc))
    return history


def classify_accuracy(net, images, labels, batch_size=64):
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    correct = 0
    for lo in range(0, len(images), batch_size):
        _, logits = backbone_forward(net, T.Tensor(images[lo:lo + batch_size]))
        correct += int((winning_class(logits) == labels[lo:lo + batch_size]).sum())
    return correct / len(images)
