"""Temporal-stream input machinery.

TV-L1 optical flow via the duality-based primal-dual scheme: at each pyramid
level the data term is linearized around the current flow (warping the second
image), a pointwise thresholding step solves the L1 data term, and a
projected ascent on the dual variables handles the TV regularizer.

Also: affine camera-motion compensation ("warp flow"), 5-field flow stacking
for the temporal CNN, cross-modality initialization of its first layer, and
a raw float32 on-disk flow cache.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T


@dataclass
class FlowField:
    u: np.ndarray  # horizontal displacement, pixels
    v: np.ndarray  # vertical displacement, pixels
    degenerate: bool = False  # warp_compensate fit failed, field returned as-is


@dataclass(frozen=True)
class TVL1Params:
    lam: float = 0.15      # data-term weight
    theta: float = 0.3     # coupling between u and the auxiliary v
    tau: float = 0.25      # dual ascent step
    warps: int = 5
    scales: int = 5
    scale_factor: float = 0.5
    inner_iters: int = 30
    min_size: int = 16
    median_filter: int = 5


def _sample(img, yy, xx):
    """Bilinear sample [H,W] or [N,H,W] per-slice at [H',W'] / [N,H',W']."""
    if img.ndim == 2:
        return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")
    n = img.shape[0]
    shape = (n,) + yy.shape[-2:]
    idx = np.broadcast_to(np.arange(n, dtype=np.float64)[:, None, None], shape)
    return ndimage.map_coordinates(
        img, [idx, np.broadcast_to(yy, shape), np.broadcast_to(xx, shape)],
        order=1, mode="nearest")


def _downscale(img, factor):
    h, w = img.shape[-2:]
    nh, nw = max(int(round(h * factor)), 1), max(int(round(w * factor)), 1)
    sm = ndimage.gaussian_filter1d(img, sigma=0.8, axis=-2)
    sm = ndimage.gaussian_filter1d(sm, sigma=0.8, axis=-1)
    yy = np.linspace(0, h - 1, nh)
    xx = np.linspace(0, w - 1, nw)
    return _sample(sm, *np.meshgrid(yy, xx, indexing="ij"))


def _upscale_flow(u, v, shape, inv_factor):
    h, w = shape
    yy = np.linspace(0, u.shape[-2] - 1, h)
    xx = np.linspace(0, u.shape[-1] - 1, w)
    grid = np.meshgrid(yy, xx, indexing="ij")
    return (_sample(u, *grid) * inv_factor, _sample(v, *grid) * inv_factor)


def _warp(img, u, v):
    h, w = img.shape[-2:]
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    return _sample(img, yy + v, xx + u)


def _forward_grad(m):
    dx = np.zeros_like(m)
    dy = np.zeros_like(m)
    dx[..., :, :-1] = m[..., :, 1:] - m[..., :, :-1]
    dy[..., :-1, :] = m[..., 1:, :] - m[..., :-1, :]
    return dx, dy


def _divergence(px, py):
    div = np.zeros_like(px)
    div[..., :, 0] += px[..., :, 0]
    div[..., :, 1:] += px[..., :, 1:] - px[..., :, :-1]
    div[..., 0, :] += py[..., 0, :]
    div[..., 1:, :] += py[..., 1:, :] - py[..., :-1, :]
    return div


def _tvl1_level(i0, i1, u, v, p: TVL1Params):
    lt = p.lam * p.theta
    p11 = np.zeros_like(i0)
    p12 = np.zeros_like(i0)
    p21 = np.zeros_like(i0)
    p22 = np.zeros_like(i0)
    i1y, i1x = np.gradient(i1, axis=(-2, -1))
    for _ in range(p.warps):
        u0, v0 = u.copy(), v.copy()
        i1w = _warp(i1, u0, v0)
        i1wx = _warp(i1x, u0, v0)
        i1wy = _warp(i1y, u0, v0)
        grad = i1wx * i1wx + i1wy * i1wy
        rho_c = i1w - i1wx * u0 - i1wy * v0 - i0
        for _ in range(p.inner_iters):
            rho = rho_c + i1wx * u + i1wy * v
            # pointwise L1 data-term solve
            d1 = np.where(rho < -lt * grad, lt * i1wx,
                          np.where(rho > lt * grad, -lt * i1wx,
                                   np.where(grad > 1e-12, -rho * i1wx / np.maximum(grad, 1e-12), 0.0)))
            d2 = np.where(rho < -lt * grad, lt * i1wy,
                          np.where(rho > lt * grad, -lt * i1wy,
                                   np.where(grad > 1e-12, -rho * i1wy / np.maximum(grad, 1e-12), 0.0)))
            v1 = u + d1
            v2 = v + d2
            # TV proximal via dual ascent
            u = v1 + p.theta * _divergence(p11, p12)
            v = v2 + p.theta * _divergence(p21, p22)
            ux, uy = _forward_grad(u)
            vx, vy = _forward_grad(v)
            taut = p.tau / p.theta
            n1 = 1.0 + taut * np.hypot(ux, uy)
            n2 = 1.0 + taut * np.hypot(vx, vy)
            p11 = (p11 + taut * ux) / n1
            p12 = (p12 + taut * uy) / n1
            p21 = (p21 + taut * vx) / n2
            p22 = (p22 + taut * vy) / n2
        if p.median_filter > 1:
            size = (1,) * (u.ndim - 2) + (p.median_filter,) * 2
            u = ndimage.median_filter(u, size=size)
            v = ndimage.median_filter(v, size=size)
    return u, v


def _tvl1_solve(a, b, params: TVL1Params):
    """Coarse-to-fine solve on [...,H,W] stacks of [0,1] grayscale frames."""
    # the published parameter defaults assume 0..255 intensities; inputs
    # here are [0,1], so rescale before solving
    a = np.asarray(a, dtype=np.float64) * 255.0
    b = np.asarray(b, dtype=np.float64) * 255.0
    if a.shape != b.shape:
        raise T.DimensionError(f"tvl1_flow: shapes differ ({a.shape} vs {b.shape})")
    if min(a.shape[-2:]) < params.min_size:
        raise ValueError(
            f"tvl1_flow: images of shape {a.shape[-2:]} are below the pyramid "
            f"minimum of {params.min_size} px"
        )
    # build pyramid, coarsest last, keeping every level >= min_size
    pyr = [(a, b)]
    for _ in range(params.scales - 1):
        pa, pb = pyr[-1]
        if min(pa.shape[-2:]) * params.scale_factor < params.min_size:
            break
        pyr.append((_downscale(pa, params.scale_factor),
                    _downscale(pb, params.scale_factor)))
    u = np.zeros_like(pyr[-1][0])
    v = np.zeros_like(pyr[-1][0])
    for level in range(len(pyr) - 1, -1, -1):
        i0, i1 = pyr[level]
        if u.shape != i0.shape:
            u, v = _upscale_flow(u, v, i0.shape[-2:], 1.0 / params.scale_factor)
        u, v = _tvl1_level(i0, i1, u, v, params)
    bound = float(max(a.shape[-2:]))
    return np.clip(u, -bound, bound), np.clip(v, -bound, bound)


def tvl1_flow(a, b, params: TVL1Params = TVL1Params()) -> FlowField:
    """Flow from frame a to frame b over a coarse-to-fine pyramid.

    Inputs are grayscale [H,W] arrays in [0,1] of equal shape.
    """
    a = np.asarray(a)
    if a.ndim != 2:
        raise T.DimensionError(f"tvl1_flow: frames must be 2-D, got {a.ndim}-D")
    u, v = _tvl1_solve(a, b, params)
    return FlowField(u=u, v=v)


def tvl1_flow_stack(frames, params: TVL1Params = TVL1Params()):
    """Flow for every consecutive pair of a [T,H,W] stack, solved jointly.

    The per-pair iterations are independent, so stacking them along a
    leading axis gives the same fields as pairwise `tvl1_flow` while
    amortizing the per-call filtering overhead.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise T.DimensionError(
            f"tvl1_flow_stack: expected [T,H,W], got {frames.ndim}-D")
    if frames.shape[0] < 2:
        return []
    u, v = _tvl1_solve(frames[:-1], frames[1:], params)
    return [FlowField(u=u[t], v=v[t]) for t in range(frames.shape[0] - 1)]


def warp_compensate(flow: FlowField) -> FlowField:
    """Subtract a globally fitted affine motion field.

    Least squares over all pixels with one robust reweighting pass (points
    with residual magnitude beyond 2x the median are dropped).  Degenerate
    fits return the input unchanged with the flag set.
    """
    u, v = flow.u, flow.v
    h, w = u.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    ones = np.ones_like(u)
    A = np.stack([ones.ravel(), xx.ravel(), yy.ravel()], axis=1)  # [P,3]

    def fit(mask):
        Am = A[mask.ravel()]
        if Am.shape[0] < 6 or np.linalg.matrix_rank(Am) < 3:
            return None
        cu, *_ = np.linalg.lstsq(Am, u.ravel()[mask.ravel()], rcond=None)
        cv, *_ = np.linalg.lstsq(Am, v.ravel()[mask.ravel()], rcond=None)
        return cu, cv

    full = np.ones_like(u, dtype=bool)
    coeffs = fit(full)
    if coeffs is None:
        return FlowField(u=u.copy(), v=v.copy(), degenerate=True)
    cu, cv = coeffs
    pred_u = (A @ cu).reshape(h, w)
    pred_v = (A @ cv).reshape(h, w)
    res = np.hypot(u - pred_u, v - pred_v)
    med = np.median(res)
    if med > 0:
        keep = res <= 2.0 * med
        refit = fit(keep)
        if refit is not None:
            cu, cv = refit
            pred_u = (A @ cu).reshape(h, w)
            pred_v = (A @ cv).reshape(h, w)
    return FlowField(u=u - pred_u, v=v - pred_v)


FLOW_CLAMP_PX = 20.0
STACK_SIZE = 5


def normalize_flow(arr, max_px=FLOW_CLAMP_PX):
    """Clamp to +-max_px and map affinely to [-1, 1]."""
    return np.clip(arr, -max_px, max_px) / max_px


def build_flow_stack(flows, center_index, stack_size=STACK_SIZE,
                     max_px=FLOW_CLAMP_PX):
    """Interleave S consecutive flow fields into a [2S,H,W] network input.

    ``flows`` is the list of per-pair FlowFields for a clip (flows[t] maps
    frame t to t+1).  The stack covers indices centered on ``center_index``;
    out-of-range indices repeat the boundary flow.
    """
    if len(flows) == 0:
        raise ValueError("build_flow_stack: no flow fields")
    start = center_index - stack_size // 2
    planes = []
    for s in range(stack_size):
        idx = min(max(start + s, 0), len(flows) - 1)
        planes.append(normalize_flow(flows[idx].u, max_px))
        planes.append(normalize_flow(flows[idx].v, max_px))
    return np.stack(planes, axis=0)


def cross_modality_init(rgb_first_layer, target_in_channels):
    """First-layer kernels for the flow stream: mean of the RGB kernels over
    their 3 input channels, replicated across all target channels."""
    w = rgb_first_layer.data if isinstance(rgb_first_layer, T.Tensor) else np.asarray(rgb_first_layer)
    if target_in_channels < 1:
        raise ValueError("target_in_channels must be >= 1")
    mean = w.mean(axis=1, keepdims=True)  # [C,1,k,k]
    return np.repeat(mean, target_in_channels, axis=1)


# ---------------------------------------------------------------------------
# on-disk cache
# ---------------------------------------------------------------------------

def flow_cache_path(cache_dir, clip_id, frame_index):
    return os.path.join(cache_dir, f"{clip_id}_{frame_index:04d}.flo")


def write_flow(path, flow: FlowField):
    """Header: H, W as little-endian int32; then u plane, v plane as
    little-endian float32."""
    h, w = flow.u.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", h, w))
        fh.write(flow.u.astype("<f4").tobytes())
        fh.write(flow.v.astype("<f4").tobytes())


def read_flow(path) -> FlowField:
    with open(path, "rb") as fh:
        h, w = struct.unpack("<ii", fh.read(8))
        payload = fh.read()
    if len(payload) != 8 * h * w:
        raise IOError(f"{path}: expected {8 * h * w} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4")
    return FlowField(u=data[:h * w].reshape(h, w).astype(np.float64),
                     v=data[h * w:].reshape(h, w).astype(np.float64))


def clip_flows(frames_gray, params=TVL1Params(), cache_dir=None, clip_id=None):
    """Flow for every consecutive frame pair, via the cache when available."""
    num_pairs = len(frames_gray) - 1
    flows = [None] * num_pairs
    paths = [None] * num_pairs
    missing = []
    for t in range(num_pairs):
        if cache_dir is not None:
            paths[t] = flow_cache_path(cache_dir, clip_id, t)
            if os.path.exists(paths[t]):
                flows[t] = read_flow(paths[t])
                continue
        missing.append(t)
    if missing:
        # solve every uncached pair jointly along the leading axis; the
        # iterations are per-pair independent so this matches the pairwise
        # solver while amortizing the per-call filtering overhead
        a = np.stack([np.asarray(frames_gray[t]) for t in missing])
        b = np.stack([np.asarray(frames_gray[t + 1]) for t in missing])
        u, v = _tvl1_solve(a, b, params)
        for i, t in enumerate(missing):
            fl = FlowField(u=u[i], v=v[i])
            if paths[t] is not None:
                write_flow(paths[t], fl)
            flows[t] = fl
    return flows


def to_grayscale(frame):
    """Luma of an RGB [3,H,W] frame in [0,1]."""
    return 0.299 * frame[0] + 0.587 * frame[1] + 0.114 * frame[2]
