"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The graph is a tape rebuilt on every forward pass: each op returns a Tensor
holding a backward closure and its parents, and ``Tensor.backward`` replays
the closures in reverse topological order. Feature maps follow the NCHW
(batch, channel, height, width) convention; weights are (out_ch, in_ch, kh,
kw); biases and logits are plain vectors. Only the operators the supernet
and the design search actually use are provided; there is no broadcasting.
"""

from __future__ import annotations

import json

import numpy as np

from . import _kernels

_grad_enabled = True


class no_grad:
    """Context manager that skips tape construction (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array with an optional gradient and backward closure."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    def backward(self, grad=None) -> None:
        """Reverse-mode sweep from this node (defaults to a ones seed)."""
        order: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, float)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Convolution primitives (shared by conv2d and transposed_conv2d)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    eh = (h + 2 * pad - kh) // stride + 1
    ew = (w + 2 * pad - kw) // stride + 1
    if eh <= 0 or ew <= 0:
        raise ValueError(f"non-positive output size for input {h}x{w}, kernel {kh}x{kw}")
    cols = np.empty((n * eh * ew, c * kh * kw))
    _kernels.im2col(np.ascontiguousarray(x), kh, kw, stride, pad, cols)
    return cols, eh, ew


def _is_pointwise(w_shape, stride, pad):
    return w_shape[2] == 1 and w_shape[3] == 1 and stride == 1 and pad == 0


def _rows(a: np.ndarray) -> np.ndarray:
    """(n, m, e, f) -> (n*e*f, m) with a cache-friendly gather."""
    n, m, e, f = a.shape
    out = np.empty((n * e * f, m))
    _kernels.nchw_to_rows(np.ascontiguousarray(a), out)
    return out


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    n = x.shape[0]
    m, c, kh, kw = w.shape
    if x.shape[1] != c:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {c}")
    if _is_pointwise(w.shape, stride, pad):
        # 1x1 kernels are plain channel mixes; skip the patch matrix
        h, w_in = x.shape[2], x.shape[3]
        out = np.matmul(w.reshape(m, c), x.reshape(n, c, h * w_in))
        return out.reshape(n, m, h, w_in), None, h, w_in
    cols, eh, ew = _im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(m, c * kh * kw).T
    return np.ascontiguousarray(out.reshape(n, eh, ew, m).transpose(0, 3, 1, 2)), cols, eh, ew


def _conv_dw(cols, x: np.ndarray, dout: np.ndarray, w_shape, stride: int, pad: int) -> np.ndarray:
    """Weight gradient; uses the cached patch matrix when one exists."""
    m, c, kh, kw = w_shape
    n, _, eh, ew = dout.shape
    if cols is None:
        if not _is_pointwise(w_shape, stride, pad):
            cols, _, _ = _im2col(x, kh, kw, stride, pad)
        else:
            g3 = dout.reshape(n, m, eh * ew)
            x3 = x.reshape(n, c, eh * ew)
            return np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)
    return (_rows(dout).T @ cols).reshape(m, c, kh, kw)


def _conv_dx(dout: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    n, c, h, w_in = x_shape
    m, _, kh, kw = w.shape
    _, _, eh, ew = dout.shape
    if _is_pointwise(w.shape, stride, pad):
        dx = np.matmul(w.reshape(m, c).T, dout.reshape(n, m, eh * ew))
        return dx.reshape(x_shape)
    dcols = _rows(dout) @ w.reshape(m, -1)
    dx = np.zeros(x_shape)
    _kernels.col2im_add(dcols, kh, kw, stride, pad, dx)
    return dx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) with zero padding.

    Args:
        x: input feature map (n, c, h, w).
        w: kernel stack (m, c, kh, kw).
        b: optional per-output-channel bias (m,).
        stride: spatial step shared by both axes.
        padding: zero-pad width on every border.

    The backward closure produces gradients for x, w and b.
    """
    xv, wv = _as_array(x), _as_array(w)
    out, cols, eh, ew = _conv_fwd(xv, wv, stride, padding)
    if b is not None:
        out = out + _as_array(b)[None, :, None, None]
    parents = [x, w] + ([b] if b is not None else [])

    def backward(g):
        if x.requires_grad:
            x.accumulate(_conv_dx(g, wv, xv.shape, stride, padding))
        if w.requires_grad:
            w.accumulate(_conv_dw(cols, xv, g, wv.shape, stride, padding))
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2, 3)))

    return _make(out, parents, backward)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     padding: int = 0) -> Tensor:
    """Per-channel convolution: kernel (c, 1, kh, kw), one filter per channel."""
    xv, wv = _as_array(x), _as_array(w)
    c, one, kh, kw = wv.shape
    if one != 1 or xv.shape[1] != c:
        raise ValueError(f"depthwise kernel {wv.shape} does not match input {xv.shape}")
    pad = padding
    xc = np.ascontiguousarray(xv)
    wc = np.ascontiguousarray(wv[:, 0])
    eh = xv.shape[2] + 2 * pad - kh + 1
    ew = xv.shape[3] + 2 * pad - kw + 1
    out = np.empty((xv.shape[0], c, eh, ew))
    _kernels.depthwise_fwd(xc, wc, pad, out)
    if b is not None:
        out += _as_array(b)[None, :, None, None]
    parents = [x, w] + ([b] if b is not None else [])

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            dx = np.zeros_like(xv)
            _kernels.depthwise_dx(g, wc, pad, dx)
            x.accumulate(dx)
        if w.requires_grad:
            dw = np.empty((c, kh, kw))
            _kernels.depthwise_dw(g, xc, pad, dw)
            w.accumulate(dw[:, None])
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2, 3)))

    return _make(out, parents, backward)


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                      stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` on shapes: (n, m, e, f) -> (n, c, h, w).

    ``w`` keeps the (m, c, kh, kw) layout of the matching forward
    convolution, so <conv2d(x, w), y> == <x, transposed_conv2d(y, w)>.
    """
    xv, wv = _as_array(x), _as_array(w)
    m, c, kh, kw = wv.shape
    if xv.shape[1] != m:
        raise ValueError(f"channel mismatch: input has {xv.shape[1]}, weight expects {m}")
    n, _, h, w_in = xv.shape
    if stride > 1:
        dil = np.zeros((n, m, (h - 1) * stride + 1, (w_in - 1) * stride + 1))
        dil[:, :, ::stride, ::stride] = xv
    else:
        dil = xv
    flipped = wv.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
    out, _, _, _ = _conv_fwd(dil, np.ascontiguousarray(flipped), 1, kh - 1 - padding)
    if b is not None:
        out = out + _as_array(b)[None, :, None, None]
    parents = [x, w] + ([b] if b is not None else [])

    def backward(g):
        if x.requires_grad:
            # forward conv of the output gradient recovers the input gradient
            dx, _, _, _ = _conv_fwd(g, wv, stride, padding)
            x.accumulate(dx)
        if w.requires_grad:
            # the weight enters linearly: <T_w(y), g> = <y, conv_w(g)>
            w.accumulate(_conv_dw(None, g, xv, wv.shape, stride, padding))
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2, 3)))

    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# Pointwise and structural ops
# ---------------------------------------------------------------------------

def add(x: Tensor, y: Tensor) -> Tensor:
    xv, yv = _as_array(x), _as_array(y)
    if xv.shape != yv.shape:
        raise ValueError(f"shape mismatch in add: {xv.shape} vs {yv.shape}")

    def backward(g):
        if x.requires_grad:
            x.accumulate(g)
        if y.requires_grad:
            y.accumulate(g)

    return _make(xv + yv, [x, y], backward)


def scale(x: Tensor, factor: float, offset: float = 0.0) -> Tensor:
    """Affine map factor*x + offset with constant coefficients."""
    f = float(factor)

    def backward(g):
        if x.requires_grad:
            x.accumulate(f * g)

    return _make(_as_array(x) * f + float(offset), [x], backward)


def relu(x: Tensor) -> Tensor:
    xv = _as_array(x)
    mask = xv > 0  # subgradient at exactly 0 is defined as 0

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * mask)

    return _make(np.where(mask, xv, 0.0), [x], backward)


def maxpool2(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max pooling; gradient routes to the argmax (first index on ties)."""
    xv = _as_array(x)
    n, c, h, w = xv.shape
    k, s = window, stride
    if h < k or w < k:
        raise ValueError(f"input {h}x{w} smaller than pooling window {k}")
    win = np.lib.stride_tricks.sliding_window_view(xv, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    n_, c_, eh, ew = win.shape[:4]
    flat = win.reshape(n, c, eh, ew, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(xv)
        ni, ci, ei, fi = np.indices(idx.shape)
        hp = ei * s + idx // k
        wp = fi * s + idx % k
        np.add.at(dx, (ni, ci, hp, wp), g)
        x.accumulate(dx)

    return _make(out, [x], backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    xv = _as_array(x)
    f = int(factor)
    out = xv.repeat(f, axis=2).repeat(f, axis=3)

    def backward(g):
        if x.requires_grad:
            n, c, h, w = xv.shape
            x.accumulate(g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)))

    return _make(out, [x], backward)


def weighted_sum(tensors: list[Tensor], weights: Tensor) -> Tensor:
    """Sum_k weights[k] * tensors[k]; differentiable in both arguments."""
    wv = _as_array(weights)
    if wv.ndim != 1 or len(tensors) != wv.size:
        raise ValueError("weights must be a vector matching the tensor list")
    vals = [_as_array(t) for t in tensors]
    out = sum(wv[k] * vals[k] for k in range(len(vals)))

    def backward(g):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate(wv[k] * g)
        if weights.requires_grad:
            weights.accumulate(np.array([np.vdot(v, g) for v in vals]))

    return _make(out, list(tensors) + [weights], backward)


def pick(vec: Tensor, index: int) -> Tensor:
    """Extract one element of a vector as a differentiable scalar."""
    i = int(index)

    def backward(g):
        if vec.requires_grad:
            d = np.zeros_like(vec.data)
            d[i] = float(g)
            vec.accumulate(d)

    return _make(vec.data[i], [vec], backward)


def concat0(tensors: list[Tensor]) -> Tensor:
    """Concatenate along axis 0, routing gradients back to each slice."""
    sizes = [t.data.shape[0] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=0)

    def backward(g):
        lo = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                t.accumulate(g[lo:lo + size])
            lo += size

    return _make(out, list(tensors), backward)


def narrow_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous channel slice [lo, hi) of an NCHW tensor."""
    out = np.ascontiguousarray(x.data[:, lo:hi])

    def backward(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[:, lo:hi] += g

    return _make(out, [x], backward)


def pick_row(matrix: Tensor, row: int) -> Tensor:
    """Extract one row of a 2-D tensor as a differentiable vector."""
    i = int(row)

    def backward(g):
        if matrix.requires_grad:
            d = np.zeros_like(matrix.data)
            d[i] = g
            matrix.accumulate(d)

    return _make(matrix.data[i], [matrix], backward)


def sum_tensors(tensors: list[Tensor]) -> Tensor:
    """Sum of same-shape tensors (used to gather scalar surrogate terms)."""
    out = sum(_as_array(t) for t in tensors)

    def backward(g):
        for t in tensors:
            if t.requires_grad:
                t.accumulate(g)

    return _make(out, list(tensors), backward)


# ---------------------------------------------------------------------------
# Categorical relaxation
# ---------------------------------------------------------------------------

def gumbel_noise(rng: np.random.Generator, size) -> np.ndarray:
    u = np.clip(rng.random(size), 1e-12, 1.0)
    return -np.log(-np.log(u))


def gumbel_softmax(logits: Tensor, temperature: float,
                   noise: np.ndarray | None = None,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Softmax((logits + gumbel) / temperature) over a logit vector.

    Pass ``rng`` to sample fresh Gumbel noise or ``noise`` to fix it (useful
    for gradient checks and for forcing one-hot draws). The output sums to 1
    and stays differentiable w.r.t. the logits (the soft relaxation is used
    in the backward pass).
    """
    lv = _as_array(logits)
    if noise is None:
        if rng is None:
            raise ValueError("provide either noise or rng")
        noise = gumbel_noise(rng, lv.shape)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = (lv + noise) / temperature
    z = z - z.max()
    e = np.exp(z)
    y = e / e.sum()

    def backward(g):
        if logits.requires_grad:
            logits.accumulate(y * (g - np.dot(g, y)) / temperature)

    return _make(y, [logits], backward)


def softmax_dot(logits: Tensor, coeffs: np.ndarray) -> Tensor:
    """Row-wise softmax of ``logits`` dotted with fixed ``coeffs``, summed.

    For an (L, K) logit matrix this returns sum_l softmax(logits[l]) .
    coeffs[l], a scalar that is differentiable in the logits. Adding a
    constant to any row leaves the value unchanged (softmax shift
    invariance).
    """
    lv = np.atleast_2d(_as_array(logits))
    cv = np.atleast_2d(np.asarray(coeffs, dtype=float))
    z = lv - lv.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    val = float(np.sum(p * cv))

    def backward(g):
        if logits.requires_grad:
            inner = (p * cv).sum(axis=1, keepdims=True)
            d = p * (cv - inner) * float(g)
            logits.accumulate(d.reshape(logits.data.shape))

    return _make(val, [logits], backward)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def pearson_loss(pred: Tensor, target) -> Tensor:
    """Negative Pearson correlation of flattened samples, averaged over batch.

    ``pred`` and ``target`` are (batch, ...) with identical shapes. Constant
    (zero-variance) entries contribute r=0 with a zero gradient; the number
    of such entries is exposed as ``degenerate_count`` on the result.
    """
    pv = _as_array(pred)
    tv = _as_array(target)
    if pv.shape != tv.shape:
        raise ValueError(f"shape mismatch: {pv.shape} vs {tv.shape}")
    batch = pv.shape[0]
    p = pv.reshape(batch, -1)
    t = tv.reshape(batch, -1)
    pc = p - p.mean(axis=1, keepdims=True)
    tc = t - t.mean(axis=1, keepdims=True)
    sp = np.sqrt((pc * pc).sum(axis=1))
    st = np.sqrt((tc * tc).sum(axis=1))
    ok = (sp > 0) & (st > 0)
    r = np.zeros(batch)
    dot = (pc * tc).sum(axis=1)
    r[ok] = dot[ok] / (sp[ok] * st[ok])
    loss = -float(r.mean())

    def backward(g):
        if pred.requires_grad:
            dp = np.zeros_like(p)
            denom = sp[ok] * st[ok]
            dp[ok] = (tc[ok] - (dot[ok] / (sp[ok] ** 2))[:, None] * pc[ok]) / denom[:, None]
            pred.accumulate((-float(g) / batch) * dp.reshape(pv.shape))

    out = _make(loss, [pred], backward)
    out.degenerate_count = int(np.sum(~ok))
    return out


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with decoupled weight decay and bias-corrected moments.

    ``groups`` is either a flat list of Tensors or a list of dicts like
    ``{"params": [...], "weight_decay": 1e-3}``; per-group settings fall back
    to the constructor defaults.
    """

    def __init__(self, groups, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if groups and not isinstance(groups[0], dict):
            groups = [{"params": list(groups)}]
        self.groups = [
            {
                "params": list(g["params"]),
                "lr": float(g.get("lr", lr)),
                "weight_decay": float(g.get("weight_decay", weight_decay)),
            }
            for g in groups
        ]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {}
        self._v = {}
        for g in self.groups:
            for p in g["params"]:
                self._m[id(p)] = np.zeros_like(p.data)
                self._v[id(p)] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def step(self) -> None:
        """One update over every parameter with a gradient."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for g in self.groups:
            lr, wd = g["lr"], g["weight_decay"]
            for p in g["params"]:
                if p.grad is None:
                    continue
                _kernels.adam_update(
                    p.data.reshape(-1), np.ascontiguousarray(p.grad).reshape(-1),
                    self._m[id(p)].reshape(-1), self._v[id(p)].reshape(-1),
                    lr, self.beta1, self.beta2, self.eps, wd, c1, c2)


# ---------------------------------------------------------------------------
# Parameter checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, params: dict) -> None:
    """Write parameters as one little-endian float64 blob plus a manifest.

    The manifest (``<path>.manifest.json``) maps each name to its element
    offset and shape inside the blob; entries are sorted by name so the
    files are byte-stable for identical parameters.
    """
    manifest = {}
    offset = 0
    with open(path, "wb") as fh:
        for name in sorted(params):
            arr = params[name].data if isinstance(params[name], Tensor) else params[name]
            arr = np.asarray(arr, dtype="<f8")
            fh.write(arr.tobytes(order="C"))
            manifest[name] = {"offset": offset, "shape": list(arr.shape)}
            offset += arr.size
    with open(path + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(path: str) -> dict:
    """Inverse of :func:`save_checkpoint`; returns name -> float64 array."""
    with open(path + ".manifest.json") as fh:
        manifest = json.load(fh)
    blob = np.fromfile(path, dtype="<f8")
    out = {}
    for name, entry in manifest.items():
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        out[name] = blob[entry["offset"]:entry["offset"] + size].reshape(shape).astype(float)
    return out

