"""Minimal dense-tensor library with tape-based reverse-mode autodiff.

All values are float32, stored as contiguous row-major numpy buffers. Each
differentiable op records a node (inputs + backward closure) on the output
tensor; ``backward`` replays the recorded graph exactly once in reverse
topological order. Ops raise ``FloatingPointError`` if they produce NaN/Inf:
a non-finite value anywhere is an error state, never silently propagated.

The library is single-threaded; concurrent use is safe only on disjoint
tensors. Randomness is never implicit: initializers take an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np


class PaddingMode(Enum):
    """Spatial padding for stencil ops. Both modes preserve 'same' geometry."""

    ZERO = "zero"
    REPLICATE = "replicate"


class _Node:
    """One recorded op: input tensors plus the gradient closure."""

    __slots__ = ("inputs", "grad_fn", "name", "consumed")

    def __init__(self, inputs: tuple["Tensor", ...], grad_fn: Callable, name: str):
        self.inputs = inputs
        self.grad_fn = grad_fn
        self.name = name
        self.consumed = False


class Tensor:
    """Dense N-d float32 array, optionally carrying a gradient buffer.

    Leaf tensors created with ``requires_grad=True`` get a zero-initialized
    ``grad`` that ``backward`` accumulates into. Op outputs propagate
    ``requires_grad`` but keep ``grad`` as None; their gradients live only
    transiently during the backward sweep.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, _node: Optional[_Node] = None):
        arr = np.asarray(data, dtype=np.float32, order="C")  # preserves 0-d, unlike ascontiguousarray
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        if self.requires_grad and _node is None:
            self.grad = np.zeros_like(arr)
        self._node = _node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Copy of the value with no graph attached."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars and ndarrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: Callable, name: str) -> Tensor:
    data = np.asarray(data, dtype=np.float32, order="C")
    _check_finite(data, name)
    if any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, _node=_Node(inputs, grad_fn, name))
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out axes that broadcasting expanded, so grad matches ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / shape ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), grad_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), grad_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), grad_fn, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn, "div")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def grad_fn(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), grad_fn, "relu")


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; callers must keep inputs strictly positive."""
    out = np.sqrt(a.data)

    def grad_fn(g):
        return (g / (2.0 * out),)

    return _make(out, (a,), grad_fn, "sqrt")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), grad_fn, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def grad_fn(g):
        return (g.transpose(inv),)

    return _make(out, (a,), grad_fn, "transpose")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    if length < 1 or start < 0 or start + length > a.shape[axis]:
        raise ValueError(f"narrow out of range: axis={axis} start={start} length={length}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    out = a.data[tuple(idx)]

    def grad_fn(g):
        full = np.zeros(a.shape, dtype=np.float32)
        full[tuple(idx)] = g
        return (full,)

    return _make(out, (a,), grad_fn, "narrow")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(tensors)
    out = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        grads = []
        for i in range(len(parts)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _make(out, tuple(parts), grad_fn, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = _unbroadcast(np.matmul(g, bt), a.shape)
        gb = _unbroadcast(np.matmul(at, g), b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn, "matmul")


def mean(a: Tensor, axes: Optional[Sequence[int]] = None, keepdims: bool = False) -> Tensor:
    axes_t = tuple(range(a.data.ndim)) if axes is None else tuple(axes)
    out = a.data.mean(axis=axes_t, keepdims=keepdims)
    count = int(np.prod([a.shape[ax] for ax in axes_t]))

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes_t)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make(out, (a,), grad_fn, "mean")


def tsum(a: Tensor, axes: Optional[Sequence[int]] = None, keepdims: bool = False) -> Tensor:
    axes_t = tuple(range(a.data.ndim)) if axes is None else tuple(axes)
    out = a.data.sum(axis=axes_t, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes_t)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn, "sum")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), grad_fn, "softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift."""
    d = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = (inv / d) * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, ggamma, gbeta

    return _make(out, (a, gamma, beta), grad_fn, "layer_norm")


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def _pad2d(x: np.ndarray, ph: int, pw: int, pad: PaddingMode) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    mode = "constant" if pad is PaddingMode.ZERO else "edge"
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode=mode)


def _unpad2d_grad(gp: np.ndarray, h: int, w: int, ph: int, pw: int, pad: PaddingMode) -> np.ndarray:
    """Fold padded-region gradients back; replicate pad credits border pixels."""
    if ph == 0 and pw == 0:
        return gp
    g = gp[:, :, ph : ph + h, pw : pw + w].copy()
    if pad is PaddingMode.REPLICATE:
        if ph:
            g[:, :, 0, :] += gp[:, :, :ph, pw : pw + w].sum(axis=2)
            g[:, :, -1, :] += gp[:, :, ph + h :, pw : pw + w].sum(axis=2)
        if pw:
            g[:, :, :, 0] += gp[:, :, ph : ph + h, :pw].sum(axis=3)
            g[:, :, :, -1] += gp[:, :, ph : ph + h, pw + w :].sum(axis=3)
        if ph and pw:
            g[:, :, 0, 0] += gp[:, :, :ph, :pw].sum(axis=(2, 3))
            g[:, :, 0, -1] += gp[:, :, :ph, pw + w :].sum(axis=(2, 3))
            g[:, :, -1, 0] += gp[:, :, ph + h :, :pw].sum(axis=(2, 3))
            g[:, :, -1, -1] += gp[:, :, ph + h :, pw + w :].sum(axis=(2, 3))
    return g


def conv2d(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    pad: PaddingMode = PaddingMode.ZERO,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """2-d cross-correlation, NCHW layout, 'same'-style odd-kernel padding.

    Output spatial dims follow (H + 2p - kh) // stride + 1 with p = (kh-1)//2.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects x[N,C,H,W] and kernel[K,C,kh,kw]")
    n, c, h, w = x.shape
    k, ck, kh, kw = kernel.shape
    if ck != c:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel dims must be odd")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("zero-size convolution output")

    xp = _pad2d(x.data, ph, pw, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]  # [N,C,Ho,Wo,kh,kw]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    wmat = kernel.data.reshape(k, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, k, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, k, 1, 1)

    def grad_fn(g):
        gm = g.reshape(n, k, ho * wo)
        gw = np.einsum("nkp,ncp->kc", gm, cols).reshape(kernel.shape)
        dcols = np.matmul(wmat.T, gm).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, i, j, :, :
                ]
        gx = _unpad2d_grad(gxp, h, w, ph, pw, pad)
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, inputs, grad_fn, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial grid: [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise ValueError("global_avg_pool expects [N,C,H,W]")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None], x.shape) / (h * w),)

    return _make(out, (x,), grad_fn, "global_avg_pool")


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"spatial dims {h}x{w} not divisible by pool factor {factor}")
    ho, wo = h // factor, w // factor
    out = x.data.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))

    def grad_fn(g):
        g = g[:, :, :, None, :, None] / (factor * factor)
        return (np.broadcast_to(g, (n, c, ho, factor, wo, factor)).reshape(x.shape).copy(),)

    return _make(out, (x,), grad_fn, "avg_pool2d")


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def grad_fn(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), grad_fn, "nearest_upsample")


# ---------------------------------------------------------------------------
# attention and loss
# ---------------------------------------------------------------------------


def multi_head_attention(
    tokens: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: int,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Self-attention over [N,T,D] tokens split into ``heads`` heads.

    Returns (output, attention [N,S,T,T], q, k); q/k are the full [N,T,D]
    projections, kept for downstream activation-map work. Every attention
    row is a softmax distribution (sums to 1).
    """
    n, t, d = tokens.shape
    if d % heads != 0:
        raise ValueError(f"token dim {d} not divisible by head count {heads}")
    hd = d // heads

    q = matmul(tokens, wq)
    k = matmul(tokens, wk)
    v = matmul(tokens, wv)

    def split(z: Tensor) -> Tensor:
        return transpose(reshape(z, (n, t, heads, hd)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), _as_tensor(1.0 / math.sqrt(hd)))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, vh)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (n, t, d))
    out = matmul(merged, wo)
    return out, attn, q, k


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy over two-way logits, log-sum-exp form.

    ``labels`` is an int vector in {0,1}. Stable for |logit| well past 30.
    """
    y = np.asarray(labels)
    if logits.data.ndim != 2 or logits.shape[1] != 2:
        raise ValueError("bce_with_logits expects logits of shape [N,2]")
    if y.shape != (logits.shape[0],):
        raise ValueError("labels must be a vector matching the batch size")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    y = y.astype(np.int64)
    n = logits.shape[0]

    z = logits.data.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    losses = lse - z[np.arange(n), y]
    out = np.float32(losses.mean())

    def grad_fn(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), y] -= 1.0
        return ((g * p / n).astype(np.float32),)

    return _make(out, (logits,), grad_fn, "bce_with_logits")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every participating requires_grad leaf.

    The recorded graph is swept exactly once in reverse topological order;
    a second call without a fresh forward raises.
    """
    if loss._node is None:
        raise RuntimeError("backward on a detached tensor: no ops recorded")
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if id(t) in seen:
            continue
        if expanded:
            seen.add(id(t))
            order.append(t)
            continue
        stack.append((t, True))
        if t._node is not None:
            if t._node.consumed:
                raise RuntimeError("backward called twice on the same graph")
            for inp in t._node.inputs:
                if id(inp) not in seen:
                    stack.append((inp, False))

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        node = t._node
        if node is None:
            continue
        g = flowing.pop(id(t), None)
        node.consumed = True
        if g is None:
            continue
        grads = node.grad_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            gi = np.asarray(gi, dtype=np.float32)
            if inp._node is None:
                if inp.requires_grad:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += gi
            elif inp.requires_grad:
                acc = flowing.get(id(inp))
                flowing[id(inp)] = gi.copy() if acc is None else acc + gi


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """AdamW state: decoupled weight decay, per-parameter moment buffers."""

    lr: float = 5e-5
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: OptimState) -> None:
    """One decoupled-weight-decay Adam update over named parameters."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ValueError(f"parameter {name} has no gradient buffer")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if state.m[name].shape != p.data.shape:
            raise ValueError(f"moment buffer shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p.data)
        _check_finite(p.data, "adamw_step")


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------


def he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True)


def scaled_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=tuple(shape)), requires_grad=True)


def zeros_param(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=np.float32), requires_grad=True)


def ones_param(shape: Sequence[int]) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=np.float32), requires_grad=True)
