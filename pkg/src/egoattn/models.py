"""Full recognizer assemblies.

Appearance stream: backbone features, class-activation spatial attention,
convolutional LSTM over time, dropout + linear activity head.  Temporal
stream: a CNN over stacked optical-flow fields.  An LRCN baseline replaces
the spatial memory with a plain vector LSTM over pooled features.  Fusion is
either score averaging or a jointly trained head over both descriptors.
"""

import numpy as np

from . import tensor as T
from .attention import AttentionMap, attended_frame_feature
from .backbone import BackboneConfig, BackboneNet, backbone_forward
from .convlstm import ClipClassifier, ConvLSTMCell, convlstm_step
from .flow import cross_modality_init
from .rng import make_rng


def _merge_params(*named):
    out = {}
    for prefix, params in named:
        for name, t in params.items():
            out[f"{prefix}.{name}"] = t
    return out


class AppearanceModel:
    """RGB stream: frames -> attended features -> ConvLSTM -> logits.

    ``attention=False`` is the ablation that feeds raw features to the
    recurrence.  Normalization statistics ride along as non-trainable
    parameters so checkpoints are self-contained.
    """

    def __init__(self, backbone_config: BackboneConfig, num_classes,
                 hidden_channels=16, attention=True, gate_variant="standard",
                 dropout_rate=0.7, seed=0):
        self.backbone = BackboneNet(backbone_config, seed=seed)
        self.cell = ConvLSTMCell(backbone_config.feature_channels,
                                 hidden_channels, seed=seed)
        self.classifier = ClipClassifier(hidden_channels, num_classes,
                                         dropout_rate=dropout_rate, seed=seed)
        self.num_classes = num_classes
        self.attention = attention
        self.gate_variant = gate_variant
        self.norm_mean = T.Tensor(np.zeros(backbone_config.in_channels))
        self.norm_std = T.Tensor(np.ones(backbone_config.in_channels))

    def set_normalization(self, mean, std):
        self.norm_mean.data[...] = mean
        self.norm_std.data[...] = std

    def params(self):
        merged = _merge_params(("backbone", self.backbone.params),
                               ("lstm", self.cell.params),
                               ("head", self.classifier.params))
        merged["norm.mean"] = self.norm_mean
        merged["norm.std"] = self.norm_std
        return merged

    def trainable_params(self):
        return {n: t for n, t in self.params().items() if t.requires_grad}

    def set_stage(self, stage):
        """Stage 1 trains the recurrence and activity head on a frozen
        backbone; stage 2 additionally unfreezes the final backbone block and
        its classification head, which reshapes the attention maps."""
        if stage == 1:
            self.backbone.set_trainable([])
        elif stage == 2:
            last = f"block{len(self.backbone.config.channels) - 1}"
            self.backbone.set_trainable([last, "head"])
        else:
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        for t in self.cell.params.values():
            t.requires_grad = True
        for t in self.classifier.params.values():
            t.requires_grad = True

    def normalize(self, frames):
        mean = self.norm_mean.data[:, None, None]
        std = self.norm_std.data[:, None, None]
        return (np.asarray(frames, dtype=np.float64) - mean) / std

    def clip_descriptor(self, frames, with_maps=False):
        """Pooled final memory state for [T,C,s,s] or [T,N,C,s,s] frames."""
        frames = self.normalize(frames)
        spatial = (self.backbone.config.final_side,) * 2
        single = frames.ndim == 4
        steps = frames.shape[0]
        n = 1 if single else frames.shape[1]
        # all frames go through the backbone and attention as one batch,
        # then the recurrence consumes per-timestep slices
        flat = frames.reshape(steps * n, *frames.shape[-3:])
        f_all, att = attended_frame_feature(self.backbone, T.Tensor(flat),
                                            enabled=self.attention)
        state = self.cell.zero_state(spatial, n)
        maps = []
        for t in range(steps):
            f_sa = T.narrow(f_all, 0, t * n, n)
            state = convlstm_step(self.cell, f_sa, state,
                                  variant=self.gate_variant)
            maps.append(self._slice_map(att, t, n, single))
        descriptor = T.global_avg_pool(state.c)
        if single:
            descriptor = T.reshape(descriptor, (self.cell.hidden_channels,))
        return (descriptor, maps) if with_maps else descriptor

    def _slice_map(self, att, t, n, single):
        if not self.attention:
            return att
        sl = t if single else slice(t * n, (t + 1) * n)
        used = att.class_used[sl] if np.ndim(att.class_used) else att.class_used
        if single and np.ndim(used):
            used = int(used)
        return AttentionMap(raw=att.raw[sl], prob=att.prob[sl], class_used=used)

    def forward_clip(self, frames, rng=None, train=False):
        """Logits plus per-timestep attention maps.

        frames: [T,C,s,s] for one clip or [T,N,C,s,s] for a batch of clips,
        already augmented but not yet normalized.
        """
        descriptor, maps = self.clip_descriptor(frames, with_maps=True)
        return self.classifier(descriptor, rng=rng, train=train), maps


class LSTMCellVec:
    """Plain fully-connected LSTM cell over vector inputs."""

    def __init__(self, input_dim, hidden_dim, seed=0):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.params = {}
        rng = make_rng(seed, "veclstm-init")
        for gate in ("i", "f", "g", "o"):
            bx = np.sqrt(1.0 / input_dim)
            bh = np.sqrt(1.0 / hidden_dim)
            self.params[f"wx_{gate}"] = T.parameter(
                rng.uniform(-bx, bx, (hidden_dim, input_dim)))
            self.params[f"wh_{gate}"] = T.parameter(
                rng.uniform(-bh, bh, (hidden_dim, hidden_dim)))
            bias0 = 1.0 if gate == "f" else 0.0
            self.params[f"b_{gate}"] = T.parameter(np.full(hidden_dim, bias0))

    def step(self, x, c_prev, h_prev):
        def gate(name):
            return T.add(T.linear(x, self.params[f"wx_{name}"]),
                         T.linear(h_prev, self.params[f"wh_{name}"],
                                  self.params[f"b_{name}"]))
        i = T.sigmoid(gate("i"))
        f = T.sigmoid(gate("f"))
        g = T.tanh(gate("g"))
        o = T.sigmoid(gate("o"))
        c = T.add(T.hadamard(i, g), T.hadamard(f, c_prev))
        return c, T.hadamard(o, T.tanh(c))


class LRCNModel:
    """Baseline without spatial memory or attention: pooled backbone features
    feed a vector LSTM, the final hidden state feeds the activity head."""

    def __init__(self, backbone_config: BackboneConfig, num_classes,
                 hidden_dim=16, dropout_rate=0.7, seed=0):
        self.backbone = BackboneNet(backbone_config, seed=seed)
        self.cell = LSTMCellVec(backbone_config.feature_channels, hidden_dim,
                                seed=seed)
        self.classifier = ClipClassifier(hidden_dim, num_classes,
                                         dropout_rate=dropout_rate, seed=seed)
        self.num_classes = num_classes
        self.hidden_dim = hidden_dim
        self.norm_mean = T.Tensor(np.zeros(backbone_config.in_channels))
        self.norm_std = T.Tensor(np.ones(backbone_config.in_channels))

    def set_normalization(self, mean, std):
        self.norm_mean.data[...] = mean
        self.norm_std.data[...] = std

    def params(self):
        merged = _merge_params(("backbone", self.backbone.params),
                               ("lstm", self.cell.params),
                               ("head", self.classifier.params))
        merged["norm.mean"] = self.norm_mean
        merged["norm.std"] = self.norm_std
        return merged

    def trainable_params(self):
        return {n: t for n, t in self.params().items() if t.requires_grad}

    def set_stage(self, stage):
        if stage == 1:
            self.backbone.set_trainable([])
        elif stage == 2:
            last = f"block{len(self.backbone.config.channels) - 1}"
            self.backbone.set_trainable([last, "head"])
        else:
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        for t in self.cell.params.values():
            t.requires_grad = True
        for t in self.classifier.params.values():
            t.requires_grad = True

    def normalize(self, frames):
        mean = self.norm_mean.data[:, None, None]
        std = self.norm_std.data[:, None, None]
        return (np.asarray(frames, dtype=np.float64) - mean) / std

    def forward_clip(self, frames, rng=None, train=False):
        frames = self.normalize(frames)
        batch = frames.shape[1] if frames.ndim == 5 else None
        dim = self.hidden_dim
        shape = (batch, dim) if batch is not None else (dim,)
        c = T.Tensor(np.zeros(shape))
        h = T.Tensor(np.zeros(shape))
        for t in range(frames.shape[0]):
            pooled = T.global_avg_pool(self.backbone.features(T.Tensor(frames[t])))
            c, h = self.cell.step(pooled, c, h)
        return self.classifier(h, rng=rng, train=train), []


class FlowStreamModel:
    """Temporal stream: a CNN classifier over a stacked-flow input.

    The first layer can be cross-modality initialized from an RGB model's
    first-layer kernels (channel mean replicated over the stack depth).
    """

    def __init__(self, backbone_config: BackboneConfig, seed=0,
                 rgb_first_layer=None):
        self.backbone = BackboneNet(backbone_config, seed=seed)
        self.num_classes = backbone_config.num_pretrain_classes
        if rgb_first_layer is not None:
            init = cross_modality_init(rgb_first_layer,
                                       backbone_config.in_channels)
            if init.shape != self.backbone.params["block0.kernel"].data.shape:
                raise T.DimensionError(
                    f"cross-modality init shape {init.shape} does not match "
                    f"first layer {self.backbone.params['block0.kernel'].data.shape}"
                )
            self.backbone.params["block0.kernel"].data[...] = init
        in_ch = backbone_config.in_channels
        self.norm_mean = T.Tensor(np.zeros(in_ch))
        self.norm_std = T.Tensor(np.ones(in_ch))

    def set_normalization(self, mean, std):
        self.norm_mean.data[...] = mean
        self.norm_std.data[...] = std

    def params(self):
        out = dict(self.backbone.params)
        out["norm.mean"] = self.norm_mean
        out["norm.std"] = self.norm_std
        return out

    def trainable_params(self):
        return self.backbone.trainable_params()

    def normalize(self, stack):
        mean = self.norm_mean.data[:, None, None]
        std = self.norm_std.data[:, None, None]
        return (np.asarray(stack, dtype=np.float64) - mean) / std

    def forward(self, stack, rng=None, train=False):
        """Logits for one [2S,s,s] stack or an [N,2S,s,s] batch."""
        _, logits = backbone_forward(self.backbone,
                                     T.Tensor(self.normalize(stack)))
        return logits

    def descriptor(self, stack):
        """Pooled feature vector, the penultimate representation."""
        return T.global_avg_pool(
            self.backbone.features(T.Tensor(self.normalize(stack))))

    def forward_clip(self, stacks):
        """Average the logits of several stacks drawn from one clip."""
        if len(stacks) == 0:
            raise ValueError("forward_clip: no flow stacks")
        total = None
        for stack in stacks:
            logits = self.forward(stack)
            total = logits if total is None else T.add(total, logits)
        return T.scale(total, 1.0 / len(stacks))


def softmax_scores(logits):
    data = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    e = np.exp(data - data.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def fuse_average(rgb_logits, flow_logits, rgb_weight=0.5):
    """Late fusion: convex combination of the raw per-stream scores."""
    if not 0.0 <= rgb_weight <= 1.0:
        raise ValueError("rgb_weight must be in [0, 1]")
    a = rgb_logits.data if isinstance(rgb_logits, T.Tensor) else np.asarray(rgb_logits)
    b = flow_logits.data if isinstance(flow_logits, T.Tensor) else np.asarray(flow_logits)
    if a.shape != b.shape:
        raise T.DimensionError(
            f"fuse_average: score shapes differ ({a.shape} vs {b.shape})")
    return rgb_weight * a + (1.0 - rgb_weight) * b


class FusionHead:
    """Trainable linear head over concatenated stream descriptors."""

    def __init__(self, rgb_dim, flow_dim, num_classes, seed=0):
        rng = make_rng(seed, "fusion-init")
        dim = rgb_dim + flow_dim
        bound = np.sqrt(1.0 / dim)
        self.params = {
            "fuse.weight": T.parameter(rng.uniform(-bound, bound,
                                                   (num_classes, dim))),
            "fuse.bias": T.parameter(np.zeros(num_classes)),
        }

    def __call__(self, rgb_descriptor, flow_descriptor):
        joined = T.concat([T.as_tensor(rgb_descriptor),
                           T.as_tensor(flow_descriptor)], axis=-1)
        return T.linear(joined, self.params["fuse.weight"],
                        self.params["fuse.bias"])
