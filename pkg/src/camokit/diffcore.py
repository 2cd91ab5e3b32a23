"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations the camouflage pipeline needs are provided: 2-D
convolution, a couple of activations, bilinear affine resampling, alpha
compositing, elementwise arithmetic, reductions and a few shape ops.
Binary elementwise ops accept operands of identical shape or a scalar;
there is no general broadcasting.

Each op records its parents and a closure mapping the upstream gradient
to parent gradients. ``Tensor.backward`` walks the graph in reverse
topological order, visiting every node exactly once.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LEAKY_SLOPE = 0.1


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ParameterError(ValueError):
    """Raised for out-of-range scalar parameters."""


class UsageError(RuntimeError):
    """Raised when the engine is driven incorrectly (e.g. non-scalar loss)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- basic introspection ---------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def max(self, axis=None):
        return max_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _operands(a, b):
    """Coerce a binary op's operands; scalars stay Python/numpy scalars."""
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if not a_t and np.ndim(a) > 0:
        a = Tensor(np.asarray(a, dtype=b.dtype if b_t else None))
        a_t = True
    if not b_t and np.ndim(b) > 0:
        b = Tensor(np.asarray(b, dtype=a.dtype if a_t else None))
        b_t = True
    if a_t and b_t and a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        for axis, (sa, sb) in enumerate(zip(a.shape, b.shape)):
            if sa != sb:
                raise DimensionError(f"shape mismatch on axis {axis}: {a.shape} vs {b.shape}")
        raise DimensionError(f"rank mismatch: {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _data(x):
    return x.data if isinstance(x, Tensor) else x


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = _data(a) + _data(b)
    parents = [t for t in (a, b) if isinstance(t, Tensor)]

    def backward(g):
        return [_reduce_to(g, p.shape) for p in parents]

    return _make(out, parents, backward)


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = _data(a) - _data(b)
    parents, signs = [], []
    for t, s in ((a, 1.0), (b, -1.0)):
        if isinstance(t, Tensor):
            parents.append(t)
            signs.append(s)

    def backward(g):
        return [_reduce_to(g * s, p.shape) for p, s in zip(parents, signs)]

    return _make(out, parents, backward)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    ad, bd = _data(a), _data(b)
    out = ad * bd
    parents, others = [], []
    if isinstance(a, Tensor):
        parents.append(a)
        others.append(bd)
    if isinstance(b, Tensor):
        parents.append(b)
        others.append(ad)

    def backward(g):
        return [_reduce_to(g * o, p.shape) for p, o in zip(parents, others)]

    return _make(out, parents, backward)


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    out = xd**p

    def backward(g):
        return [g * p * xd ** (p - 1)]

    return _make(out, [x], backward)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        return [g * 0.5 / out]

    return _make(out, [x], backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return [g * out]

    return _make(out, [x], backward)


def log(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return [g / xd]

    return _make(np.log(xd), [x], backward)


def clamp(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was inside the range."""
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = (xd >= lo) & (xd <= hi)

    def backward(g):
        return [g * inside]

    return _make(out, [x], backward)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    xd = x.data
    pos = xd > 0
    scale = np.where(pos, 1.0, slope).astype(xd.dtype)
    out = xd * scale

    def backward(g):
        return [g * scale]

    return _make(out, [x], backward)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)

    def backward(g):
        return [g * out * (1.0 - out)]

    return _make(out, [x], backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))

    def backward(g):
        return [g * _stable_sigmoid(xd)]

    return _make(out, [x], backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ParameterError(f"unknown activation {kind!r}")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return [g - soft * g.sum(axis=axis, keepdims=True)]

    return _make(out, [x], backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis))


# -- reductions ----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes)
    shape = x.shape

    def backward(g):
        return [np.broadcast_to(np.expand_dims(g, axes), shape).copy()]

    return _make(np.asarray(out), [x], backward)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axes), 1.0 / n)


def _extreme(x: Tensor, axis, pick) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    keep = [a for a in range(x.ndim) if a not in axes]
    # move reduced axes to the end and flatten them so argmax picks a single element
    moved = np.transpose(x.data, keep + list(axes))
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    idx = pick(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], np.asarray(g)[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        inv = np.argsort(keep + list(axes))
        return [np.transpose(gmoved, inv)]

    return _make(np.asarray(out), [x], backward)


def max_(x: Tensor, axis=None) -> Tensor:
    """Maximum; the gradient goes to the first maximal element."""
    return _extreme(x, axis, np.argmax)


def min_(x: Tensor, axis=None) -> Tensor:
    return _extreme(x, axis, np.argmin)


# -- shape ops ----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return [g.reshape(src)]

    return _make(out, [x], backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        return [np.transpose(g, inv)]

    return _make(np.transpose(x.data, axes), [x], backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    if isinstance(out, np.ndarray) and np.shares_memory(out, x.data):
        out = out.copy()

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return [full]

    return _make(np.asarray(out), [x], backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return [np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])]

    return _make(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def put(base: Tensor, value: Tensor, index) -> Tensor:
    """Functional slice assignment: copy of ``base`` with ``base[index] = value``."""
    base, value = as_tensor(base), as_tensor(value)
    out = base.data.copy()
    if out[index].shape != value.shape:
        raise DimensionError(f"put: region {out[index].shape} vs value {value.shape}")
    out[index] = value.data

    def backward(g):
        gb = g.copy()
        gb[index] = 0
        return [gb, g[index].copy()]

    return _make(out, [base, value], backward)


# -- convolution --------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with kernel[F,C,kh,kw] (plus optional bias[F])."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d channel axis mismatch: input C={c}, kernel C={kc}")
    if kh > h + 2 * padding:
        raise DimensionError(f"conv2d height axis: kernel {kh} exceeds padded input {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise DimensionError(f"conv2d width axis: kernel {kw} exceeds padded input {w + 2 * padding}")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"conv2d bias axis: expected ({f},), got {bias.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    # cols: (N, Ho, Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)
    kmat = kernel.data.reshape(f, -1)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    parents = [x, kernel] + ([bias] if bias is not None else [])

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)  # N,Ho,Wo,F
        gk = None
        if kernel.requires_grad:
            gk = (gt.reshape(-1, f).T @ cols.reshape(-1, c * kh * kw)).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = (gt @ kmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, backward)


# -- resampling and compositing ----------------------------------------------

def affine_sample(
    src: Tensor,
    rotation: float,
    scale: float,
    out_size: tuple,
    center: Optional[tuple] = None,
) -> tuple:
    """Bilinearly resample src[C,h,w] onto an (H, W) canvas.

    The source centre lands at ``center`` (output pixel coordinates
    (y, x), default the canvas centre), scaled by ``scale`` and rotated
    by ``rotation`` radians. Pixel centres sit at integer coordinates.
    An output pixel is covered when its pre-image falls inside the
    source footprint [-0.5, n - 0.5]; covered samples clamp to the
    border pixels, uncovered samples are 0.

    Returns ``(out[C,H,W], mask[1,H,W])``; the mask is a plain array.
    """
    if not scale > 0:
        raise ParameterError(f"scale must be positive, got {scale}")
    c, h, w = src.shape
    oh, ow = out_size
    if center is None:
        center = ((oh - 1) / 2.0, (ow - 1) / 2.0)
    cy, cx = center
    yy, xx = np.meshgrid(np.arange(oh, dtype=np.float64), np.arange(ow, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    cos_r, sin_r = math.cos(rotation), math.sin(rotation)
    if rotation == 0.0:
        sx, sy = dx / scale, dy / scale
    else:
        # inverse rotation maps output offsets back into the source frame
        sx = (cos_r * dx + sin_r * dy) / scale
        sy = (-sin_r * dx + cos_r * dy) / scale
    sx = sx + (w - 1) / 2.0
    sy = sy + (h - 1) / 2.0
    covered = (sx >= -0.5) & (sx <= w - 0.5) & (sy >= -0.5) & (sy <= h - 0.5)
    sx = np.clip(sx, 0.0, w - 1)
    sy = np.clip(sy, 0.0, h - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    dt = src.data.dtype
    weights = [((1 - fy) * (1 - fx) * covered).astype(dt), ((1 - fy) * fx * covered).astype(dt),
               (fy * (1 - fx) * covered).astype(dt), (fy * fx * covered).astype(dt)]
    flat_idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1]
    flat = src.data.reshape(c, h * w)
    out = np.zeros((c, oh, ow), dtype=dt)
    for wt, idx in zip(weights, flat_idx):
        # skip zero-weight corners so exact grid hits reproduce the source bit-for-bit
        out += np.where(wt > 0, flat[:, idx] * wt, 0)
    mask = covered.astype(dt)[None]

    def backward(g):
        gflat = np.zeros((c, h * w), dtype=np.float64)
        for wt, idx in zip(weights, flat_idx):
            contrib = (g * wt).reshape(c, -1)
            for ch in range(c):
                gflat[ch] += np.bincount(idx.ravel(), weights=contrib[ch], minlength=h * w)
        return [gflat.reshape(c, h, w).astype(g.dtype, copy=False)]

    return _make(out, [src], backward), mask


def alpha_composite(image: Tensor, patch: Tensor, mask, alpha: float) -> Tensor:
    """mask * (alpha * patch + (1 - alpha) * image) + (1 - mask) * image."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    image, patch = as_tensor(image), as_tensor(patch)
    m = _data(mask)
    if image.shape != patch.shape:
        raise DimensionError(f"alpha_composite: image {image.shape} vs patch {patch.shape}")
    if m.shape[-2:] != image.shape[-2:]:
        raise DimensionError(f"alpha_composite: mask {m.shape} vs image {image.shape}")
    on = np.broadcast_to(m > 0, image.shape)
    if alpha == 0.0:
        blended = image.data
    elif alpha == 1.0:
        blended = patch.data
    else:
        blended = alpha * patch.data + (1.0 - alpha) * image.data
    out = np.where(on, blended, image.data).astype(image.dtype, copy=False)

    def backward(g):
        gi = np.where(on, g * (1.0 - alpha), g)
        gp = np.where(on, g * alpha, 0.0).astype(g.dtype, copy=False)
        return [gi, gp]

    return _make(out, [image, patch], backward)


# -- gradient checking --------------------------------------------------------

def numerical_gradient(fn: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        fp = float(fn(Tensor(x.copy())).data)
        x[i] = orig - eps
        fm = float(fn(Tensor(x.copy())).data)
        x[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def grad_check(fn: Callable[[Tensor], Tensor], x, eps: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between autodiff and central differences over every element of x.

    Elements whose analytic and numeric values are both below ``floor``
    in magnitude are skipped.
    """
    x = np.array(_data(x), dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    fn(leaf).backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
    numeric = numerical_gradient(fn, x, eps)
    keep = (np.abs(analytic) >= floor) | (np.abs(numeric) >= floor)
    if not keep.any():
        return 0.0
    a, n = analytic[keep], numeric[keep]
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
    return float(rel.max())
