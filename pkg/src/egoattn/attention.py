"""Class activation maps and spatial-attention feature weighting.

The CAM for class c is the per-location dot product of the head-weight row c
with the channel fiber of the final feature map.  Softmax-normalizing the CAM
over space gives a probability map that multiplicatively reweights every
feature channel.  Both steps are differentiable in the feature map and the
head weights, so stage-2 fine-tuning specializes the maps.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import backbone_forward, winning_class


@dataclass
class AttentionMap:
    raw: np.ndarray        # [H,W] CAM values
    prob: np.ndarray       # [H,W] spatial softmax of raw
    class_used: int


def compute_cam(f, head_weights, c):
    """CAM(i) = sum_l w[c,l] * f[l,i].

    f: [L,H,W] with scalar c, or [N,L,H,W] with a length-N index vector.
    Differentiable w.r.t. both f and head_weights.
    """
    f = T.as_tensor(f)
    w = T.as_tensor(head_weights)
    k, l = w.data.shape
    if f.data.shape[-3] != l:
        raise T.DimensionError(
            f"compute_cam: channel axis has size {f.data.shape[-3]}, "
            f"head weights expect {l}"
        )
    batched = f.ndim == 4
    if batched:
        c = np.asarray(c, dtype=np.intp)
        if c.shape != (f.data.shape[0],):
            raise T.DimensionError(
                f"compute_cam: batch axis 0 has size {f.data.shape[0]}, "
                f"class indices have shape {c.shape}"
            )
        if np.any(c < 0) or np.any(c >= k):
            raise IndexError(f"class index out of range [0, {k})")
        wc = w.data[c]                                     # [N,L]
        cam = np.einsum("nl,nlhw->nhw", wc, f.data)

        def backward(g):
            if f.requires_grad:
                _accum_f = wc[:, :, None, None] * g[:, None, :, :]
                T._accum(f, _accum_f)
            if w.requires_grad:
                dw_rows = np.einsum("nhw,nlhw->nl", g, f.data)
                dw = np.zeros_like(w.data)
                np.add.at(dw, c, dw_rows)
                T._accum(w, dw)

        return T.node(cam, (f, w), backward)

    c = int(c)
    if not 0 <= c < k:
        raise IndexError(f"class index {c} out of range [0, {k})")
    wc = w.data[c]
    cam = np.tensordot(wc, f.data, axes=([0], [0]))        # [H,W]

    def backward(g):
        if f.requires_grad:
            T._accum(f, wc[:, None, None] * g[None, :, :])
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            dw[c] = np.tensordot(g, f.data, axes=([0, 1], [1, 2]))
            T._accum(w, dw)

    return T.node(cam, (f, w), backward)


def apply_spatial_attention(f, cam):
    """Weight every channel of f by spatial_softmax(cam).

    f: [L,H,W] or [N,L,H,W]; cam: matching [H,W] or [N,H,W].
    """
    f = T.as_tensor(f)
    cam = T.as_tensor(cam)
    if f.data.shape[-2:] != cam.data.shape[-2:]:
        raise T.DimensionError(
            f"apply_spatial_attention: spatial axes {f.data.shape[-2:]} vs "
            f"{cam.data.shape[-2:]}"
        )
    if (f.ndim == 4) != (cam.ndim == 3):
        raise T.DimensionError(
            "apply_spatial_attention: batched feature map needs a batched CAM"
        )
    s = T.spatial_softmax(cam)
    sb = s.data[..., None, :, :]  # broadcast over the channel axis

    def backward(g):
        if f.requires_grad:
            T._accum(f, g * sb)
        if s.requires_grad:
            T._accum(s, (g * f.data).sum(axis=-3))

    return T.node(f.data * sb, (f, s), backward)


def attended_frame_feature(net, frame, enabled=True):
    """Per-frame pipeline: features -> winning class -> CAM -> attention.

    Returns (f_SA, AttentionMap).  With attention disabled (ablation), f is
    passed through unchanged and the map reported is uniform.
    """
    f, logits = backbone_forward(net, frame)
    h, w = f.data.shape[-2:]
    if not enabled:
        uniform = np.full((h, w), 1.0 / (h * w))
        return f, AttentionMap(raw=np.zeros((h, w)), prob=uniform, class_used=-1)
    c = winning_class(logits)
    cam = compute_cam(f, net.head_weight, c)
    f_sa = apply_spatial_attention(f, cam)
    prob = T.spatial_softmax(T.Tensor(cam.data)).data
    used = int(c) if np.isscalar(c) or np.ndim(c) == 0 else np.asarray(c)
    return f_sa, AttentionMap(raw=cam.data.copy(), prob=prob, class_used=used)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def upsample_nearest(arr, size):
    """Nearest-neighbor upsample of an [H,W] map to size x size."""
    h, w = arr.shape
    if size % h or size % w:
        raise ValueError(f"target size {size} not a multiple of {arr.shape}")
    return np.repeat(np.repeat(arr, size // h, axis=0), size // w, axis=1)


def write_pgm(path, gray):
    """8-bit binary PGM (P5)."""
    gray = np.asarray(gray, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode())
        fh.write(gray.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise IOError(f"{path}: not a binary PGM file")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        fh.readline()  # maxval
        return np.frombuffer(fh.read(), dtype=np.uint8).reshape(h, w)


def export_attention_map(att, out_dir, clip_id, frame_idx, size):
    """Write the CAM as `<clip>_<frameidx>_att.pgm`, min-max normalized and
    nearest-neighbor upsampled to the input resolution."""
    raw = att.raw
    span = raw.max() - raw.min()
    norm = (raw - raw.min()) / span if span > 0 else np.zeros_like(raw)
    gray = np.round(upsample_nearest(norm, size) * 255.0).astype(np.uint8)
    path = os.path.join(out_dir, f"{clip_id}_{frame_idx}_att.pgm")
    write_pgm(path, gray)
    return path
