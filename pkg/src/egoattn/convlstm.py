"""Convolutional LSTM cell and sequence encoder.

Gates are 3x3 same-padded convolutions over spatial tensors, so the memory
state keeps the feature-map geometry across time.  The clip descriptor is
the global average pool of the final memory state.

Two memory updates are available:

* ``standard`` (default): c_t = i_t * c~_t + f_t * c_{t-1}, the conventional
  LSTM update.
* ``verbatim``: c_t = c~_t * x_t + f_t * c_{t-1}, which multiplies the
  candidate by the attended input directly and never uses the input gate.
  This form forces hidden == input channels and is kept behind a flag; the
  standard update is almost certainly what is meant, since the input gate is
  otherwise defined but unused.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import make_rng

GATE_VARIANTS = ("standard", "verbatim")


@dataclass
class ConvLSTMState:
    c: T.Tensor
    h: T.Tensor


class ConvLSTMCell:
    def __init__(self, input_channels, hidden_channels=64, kernel_size=3,
                 seed=0, forget_bias=1.0):
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd to preserve spatial dims")
        self.input_channels = input_channels
        self.hidden_channels = hidden_channels
        self.kernel_size = kernel_size
        self.params = {}
        rng = make_rng(seed, "convlstm-init")
        k = kernel_size
        for gate in ("i", "f", "g", "o"):
            bx = np.sqrt(1.0 / (input_channels * k * k))
            bh = np.sqrt(1.0 / (hidden_channels * k * k))
            self.params[f"wx_{gate}"] = T.parameter(
                rng.uniform(-bx, bx, (hidden_channels, input_channels, k, k)))
            self.params[f"wh_{gate}"] = T.parameter(
                rng.uniform(-bh, bh, (hidden_channels, hidden_channels, k, k)))
            bias0 = forget_bias if gate == "f" else 0.0
            self.params[f"b_{gate}"] = T.parameter(
                np.full(hidden_channels, float(bias0)))

    def zero_state(self, spatial, batch=None):
        shape = (self.hidden_channels, *spatial)
        if batch is not None:
            shape = (batch, *shape)
        return ConvLSTMState(c=T.Tensor(np.zeros(shape)), h=T.Tensor(np.zeros(shape)))

    def _gate(self, name, x, h):
        pad = self.kernel_size // 2
        pre = T.add(T.conv2d(x, self.params[f"wx_{name}"], stride=1, padding=pad),
                    T.conv2d(h, self.params[f"wh_{name}"],
                             self.params[f"b_{name}"], stride=1, padding=pad))
        return pre

    def _gates_fused(self, x, h):
        """All four gate pre-activations from one stacked convolution."""
        pad = self.kernel_size // 2
        wx = T.concat([self.params[f"wx_{g}"] for g in "ifgo"], axis=0)
        wh = T.concat([self.params[f"wh_{g}"] for g in "ifgo"], axis=0)
        w = T.concat([wx, wh], axis=1)
        b = T.concat([self.params[f"b_{g}"] for g in "ifgo"], axis=0)
        xh = T.concat([x, h], axis=-3)
        pre = T.conv2d(xh, w, b, stride=1, padding=pad)
        n = self.hidden_channels
        return {g: T.narrow(pre, -3, i * n, n) for i, g in enumerate("ifgo")}


def convlstm_step(cell, x, prev, variant="standard"):
    """One recurrence step on attended features x: [L,H,W] or [N,L,H,W]."""
    if variant not in GATE_VARIANTS:
        raise ValueError(f"unknown gate variant {variant!r}")
    if variant == "verbatim" and cell.hidden_channels != cell.input_channels:
        raise ValueError(
            "verbatim memory update multiplies the candidate by the input, "
            f"which requires hidden == input channels "
            f"({cell.hidden_channels} != {cell.input_channels})"
        )
    x = T.as_tensor(x)
    if x.data.shape[-3] != cell.input_channels:
        raise T.DimensionError(
            f"convlstm_step: channel axis has size {x.data.shape[-3]}, "
            f"cell expects {cell.input_channels}"
        )
    if x.data.shape[-2:] != prev.c.data.shape[-2:]:
        raise T.DimensionError(
            f"convlstm_step: spatial axes {x.data.shape[-2:]} vs state "
            f"{prev.c.data.shape[-2:]}"
        )
    pre = cell._gates_fused(x, prev.h)
    i = T.sigmoid(pre["i"])
    f = T.sigmoid(pre["f"])
    g = T.tanh(pre["g"])
    o = T.sigmoid(pre["o"])
    if variant == "standard":
        c = T.add(T.hadamard(i, g), T.hadamard(f, prev.c))
    else:
        c = T.add(T.hadamard(g, x), T.hadamard(f, prev.c))
    h = T.hadamard(o, T.tanh(c))
    return ConvLSTMState(c=c, h=h)


def encode_sequence(cell, features, init=None, variant="standard"):
    """Fold the cell over a feature sequence; descriptor = GAP(c_T)."""
    if len(features) == 0:
        raise ValueError("encode_sequence: empty feature sequence")
    first = T.as_tensor(features[0])
    spatial = first.data.shape[-2:]
    batch = first.data.shape[0] if first.ndim == 4 else None
    state = init if init is not None else cell.zero_state(spatial, batch)
    for x in features:
        state = convlstm_step(cell, x, state, variant=variant)
    return T.global_avg_pool(state.c)


class ClipClassifier:
    """Dropout + fully-connected layer over the clip descriptor."""

    def __init__(self, in_dim, num_classes, dropout_rate=0.7, seed=0):
        rng = make_rng(seed, "classifier-init")
        bound = np.sqrt(1.0 / in_dim)
        self.params = {
            "clf.weight": T.parameter(rng.uniform(-bound, bound, (num_classes, in_dim))),
            "clf.bias": T.parameter(np.zeros(num_classes)),
        }
        self.dropout_rate = dropout_rate

    def __call__(self, descriptor, rng=None, train=False):
        return classify_clip(descriptor, self.params["clf.weight"],
                             self.params["clf.bias"], self.dropout_rate,
                             rng=rng, train=train)


def classify_clip(descriptor, weight, bias, dropout_rate=0.7, rng=None, train=False):
    """Activity logits from a clip descriptor; dropout precedes the layer and
    is active only in training mode."""
    x = T.as_tensor(descriptor)
    if train and dropout_rate > 0.0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        x = T.dropout(x, dropout_rate, rng, train=True)
    return T.linear(x, weight, bias)
