"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every op returns a new Tensor holding its value
plus a closure that pushes adjoints into its parents.  ``Tensor.backward``
replays those closures in reverse topological order, summing contributions
when a value fans out to several consumers.

All ops accept an optional leading batch axis on top of the documented
per-sample shapes (e.g. conv2d takes [Cin,H,W] or [N,Cin,H,W]).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# When enabled, every op asserts its output is finite.  Off by default; the
# test suite and `egoattn verify` switch it on.
DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    global DEBUG_CHECKS
    DEBUG_CHECKS = bool(enabled)


class DimensionError(ValueError):
    """Raised on shape mismatches; the message names the offending axis."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self, seed=None):
        """Accumulate gradients of this tensor w.r.t. all graph leaves.

        ``seed`` defaults to ones (i.e. d(self)/d(self)); pass an array to
        back-propagate an externally supplied adjoint.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise DimensionError(
                    f"seed shape {seed.shape} != tensor shape {self.data.shape}"
                )
        topo = _toposort(self)
        _accum(self, seed)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)


def _toposort(root):
    """Iterative post-order DFS; reverse gives the adjoint replay order."""
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return topo


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def node(data, parents, backward_fn):
    """Create a graph node; ``backward_fn(grad_out)`` pushes into parents."""
    out = Tensor(data)
    if DEBUG_CHECKS and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _check_same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        for ax, (da, db) in enumerate(zip(a.data.shape, b.data.shape)):
            if da != db:
                raise DimensionError(
                    f"{opname}: axis {ax} mismatch ({da} vs {db})"
                )
        raise DimensionError(
            f"{opname}: rank mismatch ({a.data.shape} vs {b.data.shape})"
        )


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return node(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "sub")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return node(a.data - b.data, (a, b), backward)


def hadamard(a, b):
    """Elementwise product of same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "hadamard")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return node(a.data * b.data, (a, b), backward)


def scale(a, s):
    a = as_tensor(a)
    s = float(s)

    def backward(g):
        _accum(a, g * s)

    return node(a.data * s, (a,), backward)


def sigmoid(x):
    x = as_tensor(x)
    # Branch on sign to avoid exp overflow for large |x|.
    y = np.where(x.data >= 0,
                 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def backward(g):
        _accum(x, g * y * (1.0 - y))

    return node(y, (x,), backward)


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        _accum(x, g * (1.0 - y * y))

    return node(y, (x,), backward)


def relu(x):
    x = as_tensor(x)
    y = np.maximum(x.data, 0.0)

    def backward(g):
        _accum(x, g * (x.data > 0))

    return node(y, (x,), backward)


def dropout(x, rate, rng, train=True):
    """Inverted-scaling dropout: kept activations divided by (1 - rate).

    Identity in eval mode (train=False) and for rate == 0.
    """
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        def backward_id(g):
            _accum(x, g)
        return node(x.data.copy(), (x,), backward_id)
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def backward(g):
        _accum(x, g * mask)

    return node(x.data * mask, (x,), backward)


def sum_all(x):
    x = as_tensor(x)

    def backward(g):
        _accum(x, np.full(x.data.shape, float(g)))

    return node(x.data.sum(), (x,), backward)


def mean_all(x):
    return scale(sum_all(x), 1.0 / x.data.size)


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return node(x.data.reshape(shape), (x,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return node(np.concatenate([t.data for t in tensors], axis=axis),
                tuple(tensors), backward)


def narrow(x, axis, start, length):
    """Contiguous slice of size `length` along one axis."""
    x = as_tensor(x)
    size = x.data.shape[axis]
    if start < 0 or length < 1 or start + length > size:
        raise DimensionError(
            f"narrow: slice [{start}, {start + length}) out of range for "
            f"axis of size {size}"
        )
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[sl] = g
        _accum(x, dx)

    return node(x.data[sl], (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra / network layers
# ---------------------------------------------------------------------------

def linear(x, w, b=None):
    """Affine map: x [in] or [N,in], w [out,in], b [out] -> [out] or [N,out]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.shape[-1] != w.data.shape[1]:
        raise DimensionError(
            f"linear: input axis {x.ndim - 1} has size {x.data.shape[-1]}, "
            f"weight expects {w.data.shape[1]}"
        )
    y = x.data @ w.data.T
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (w.data.shape[0],):
            raise DimensionError(
                f"linear: bias axis 0 has size {b.data.shape[0]}, "
                f"expected {w.data.shape[0]}"
            )
        y = y + b.data
        parents.append(b)

    def backward(g):
        if x.ndim == 1:
            _accum(x, g @ w.data)
            _accum(w, np.outer(g, x.data))
            if b is not None:
                _accum(b, g)
        else:
            _accum(x, g @ w.data)
            _accum(w, g.T @ x.data)
            if b is not None:
                _accum(b, g.sum(axis=0))

    return node(y, tuple(parents), backward)


def conv2d(x, k, b=None, stride=1, padding=0):
    """2-D cross-correlation.

    x: [Cin,H,W] or [N,Cin,H,W]; k: [Cout,Cin,kH,kW]; b: [Cout] or None.
    Output spatial dims follow the floor convention
    H' = (H + 2*padding - kH) // stride + 1.
    """
    x, k = as_tensor(x), as_tensor(k)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d: input must be 3-D or 4-D, got {x.ndim}-D")
    if k.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be 4-D, got {k.ndim}-D")
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = k.data.shape
    if kcin != cin:
        raise DimensionError(
            f"conv2d: input channel axis has size {cin}, kernel expects {kcin}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: spatial axes too small ({h}x{w} with kernel {kh}x{kw}, "
            f"padding {padding})"
        )

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    # windows: [N, Cin, H', W', kH, kW]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = np.ascontiguousarray(np.moveaxis(win, 1, 3))  # [N,H',W',Cin,kH,kW]
    ckk = cin * kh * kw
    win2 = win.reshape(n * ho * wo, ckk)
    y = (win2 @ k.data.reshape(cout, ckk).T).reshape(n, ho, wo, cout)
    y = np.moveaxis(y, 3, 1)
    parents = [x, k]
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (cout,):
            raise DimensionError(
                f"conv2d: bias axis 0 has size {b.data.shape[0]}, expected {cout}"
            )
        y = y + b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        g4 = g[None] if squeeze else g
        if k.requires_grad:
            # [Cout,Cin,kH,kW] from sum over batch and output locations
            gmat = np.moveaxis(g4, 1, 3).reshape(n * ho * wo, cout)
            dk = (gmat.T @ win2).reshape(cout, cin, kh, kw)
            _accum(k, dk)
        if b is not None and b.requires_grad:
            _accum(b, g4.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            if stride == 1:
                # dx is the full correlation of g with the rotated kernel
                gp = np.pad(g4, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
                gwin2 = np.ascontiguousarray(
                    np.moveaxis(gwin, 1, 3)).reshape(-1, cout * kh * kw)
                kr = np.ascontiguousarray(
                    np.moveaxis(k.data[:, :, ::-1, ::-1], 1, 0)
                ).reshape(cin, cout * kh * kw)
                ph, pw = xp.shape[2], xp.shape[3]
                dxp = (gwin2 @ kr.T).reshape(n, ph, pw, cin)
                dxp = np.moveaxis(dxp, 3, 1)
            else:
                dxp = np.zeros_like(xp)
                gmoved = np.moveaxis(g4, 1, 3)  # [N,H',W',Cout]
                for i in range(kh):
                    for j in range(kw):
                        # contribution of kernel tap (i,j) scattered back
                        contrib = gmoved @ k.data[:, :, i, j]  # [N,H',W',Cin]
                        dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            np.moveaxis(contrib, 3, 1)
            if padding:
                dxp = dxp[:, :, padding:-padding or None, padding:-padding or None]
            _accum(x, dxp[0] if squeeze else dxp)

    out = y[0] if squeeze else y
    return node(out, tuple(parents), backward)


def global_avg_pool(x):
    """Spatial mean per channel: [C,H,W] -> [C] (or [N,C,H,W] -> [N,C])."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"global_avg_pool: input must be 3-D or 4-D, got {x.ndim}-D")
    h, w = x.data.shape[-2:]
    y = x.data.mean(axis=(-2, -1))

    def backward(g):
        _accum(x, np.broadcast_to(g[..., None, None] / (h * w), x.data.shape))

    return node(y, (x,), backward)


def spatial_softmax(m):
    """Softmax over the two trailing spatial axes: [H,W] or [N,H,W].

    Max-subtracted for stability; output entries are positive and sum to 1
    per map.
    """
    m = as_tensor(m)
    if m.ndim < 2:
        raise DimensionError("spatial_softmax: input must have 2 spatial axes")
    z = m.data - m.data.max(axis=(-2, -1), keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=(-2, -1), keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=(-2, -1), keepdims=True)
        _accum(m, s * (g - dot))

    return node(s, (m,), backward)


def log_softmax(x):
    """Log-softmax over the last axis: [K] or [N,K]."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        sm = np.exp(y)
        _accum(x, g - sm * g.sum(axis=-1, keepdims=True))

    return node(y, (x,), backward)


def nll_loss(log_probs, target):
    """Negative log-likelihood of the target class(es).

    log_probs: [K] with int target, or [N,K] with length-N targets (returns
    the mean over the batch).
    """
    lp = as_tensor(log_probs)
    if lp.ndim == 1:
        t = int(target)
        if not 0 <= t < lp.data.shape[0]:
            raise IndexError(f"target class {t} out of range for {lp.data.shape[0]} classes")

        def backward(g):
            gx = np.zeros_like(lp.data)
            gx[t] = -float(g)
            _accum(lp, gx)

        return node(-lp.data[t], (lp,), backward)

    t = np.asarray(target, dtype=np.intp)
    n = lp.data.shape[0]
    if t.shape != (n,):
        raise DimensionError(f"nll_loss: batch axis 0 has size {n}, targets have shape {t.shape}")
    picked = lp.data[np.arange(n), t]

    def backward(g):
        gx = np.zeros_like(lp.data)
        gx[np.arange(n), t] = -float(g) / n
        _accum(lp, gx)

    return node(-picked.mean(), (lp,), backward)


def cross_entropy(logits, target):
    return nll_loss(log_softmax(logits), target)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(f, x, h=1e-5):
    """Max relative error between tape and central-difference gradients.

    f must map a Tensor to a scalar Tensor.  Relative error per coordinate is
    |a - n| / max(1, |a|, |n|).
    """
    x = Tensor(x.data.copy(), requires_grad=True)
    out = f(x)
    if out.data.shape != ():
        raise DimensionError("grad_check: f must return a scalar")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x.data)).data
        flat[i] = orig - h
        fm = f(Tensor(x.data)).data
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
