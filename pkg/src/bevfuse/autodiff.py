"""Dense tensors with reverse-mode differentiation on an explicit tape.

The op set is exactly what the fusion pipeline needs: dense linear algebra,
2-D convolutions, attention arithmetic, pillar pooling, BEV scatter and
sampling, and the detection losses. Ops validate shapes up front, reject
non-finite outputs, and append a backward rule to the active tape when any
input requires gradients.

Training and inference run in float32; gradient checking builds the same
graphs in float64. A tape is confined to one logical thread; tensors are
immutable values and safe to share across threads.
"""

import numpy as np

from .errors import ConfigError, InternalError, NumericsError, ShapeError, UsageError

DEFAULT_DTYPE = np.float32

_OPS = {}


def _register(fn):
    _OPS[fn.__name__] = fn
    return fn


def registered_ops():
    """Sorted names of every differentiable op, for the gradcheck registry."""
    return sorted(_OPS)


def get_op(name):
    """Look up an op by registry name (indirection point for gradcheck)."""
    return _OPS[name]


class Tensor:
    """Immutable dense array plus a gradient-requirement flag.

    ``data`` is a contiguous float32 array in training/inference, float64 in
    gradient-check mode. Optimizers rewrite ``.data`` of leaf parameters
    between tape lifetimes; everything else treats tensors as values.
    """

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not np.isfinite(arr).all():
            raise NumericsError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if isinstance(like, Tensor) else None
    return Tensor(x, dtype=dtype)


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE):
    return Tensor(np.zeros(shape, dtype=dtype))


class _TapeEntry:
    __slots__ = ("name", "inputs", "out", "backward")

    def __init__(self, name, inputs, out, backward):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops; append order is topological."""

    _stack = []

    def __init__(self):
        self.entries = []

    def __len__(self):
        return len(self.entries)

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @staticmethod
    def current():
        return Tape._stack[-1] if Tape._stack else None


def _finish(name, inputs, out_data, backward):
    """Wrap an op result, enforce finiteness, and record on the active tape."""
    requires = any(t.requires_grad for t in inputs)
    try:
        out = Tensor(out_data, requires_grad=requires)
    except NumericsError:
        raise NumericsError(f"{name}: non-finite values in output") from None
    tape = Tape.current()
    if tape is not None and requires:
        tape.entries.append(_TapeEntry(name, inputs, out, backward))
    return out


class Gradients:
    """Result of a backward pass: gradient arrays keyed by tensor identity."""

    def __init__(self, by_id):
        self._by_id = by_id

    def get(self, tensor, default=None):
        hit = self._by_id.get(id(tensor))
        return hit[1] if hit is not None else default

    def __getitem__(self, tensor):
        g = self.get(tensor)
        if g is None:
            raise KeyError("no gradient recorded for tensor")
        return g

    def __contains__(self, tensor):
        return id(tensor) in self._by_id


def backward(tape, loss):
    """Reverse-topological accumulation of d(loss)/d(input) over the tape.

    Visits every recorded entry exactly once, in reverse order of recording.
    Deterministic: identical tapes give bitwise-identical gradients.
    """
    if not isinstance(loss, Tensor) or loss.shape != ():
        raise UsageError("backward expects a scalar loss tensor")
    grads = {id(loss): (loss, np.ones((), dtype=loss.dtype))}
    for entry in reversed(tape.entries):
        hit = grads.pop(id(entry.out), None)
        if hit is None:
            continue
        gout = hit[1]
        for t, g in zip(entry.inputs, entry.backward(gout)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = (t, g if prev is None else prev[1] + g)
    return Gradients(grads)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------

@_register
def add(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", (a, b), out, bwd)


@_register
def sub(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish("sub", (a, b), out, bwd)


@_register
def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish("mul", (a, b), out, bwd)


@_register
def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    out = x.data * x.dtype.type(c)

    def bwd(g):
        return (g * x.dtype.type(c),)

    return _finish("scale", (x,), out, bwd)


@_register
def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _finish("matmul", (a, b), out, bwd)


@_register
def transpose(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    out = x.data.T

    def bwd(g):
        return (g.T,)

    return _finish("transpose", (x,), out, bwd)


@_register
def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape)
    old = x.shape

    def bwd(g):
        return (g.reshape(old),)

    return _finish("reshape", (x,), out, bwd)


@_register
def concat(parts, axis=0):
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise UsageError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish("concat", parts, out, bwd)


@_register
def relu(x):
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return _finish("relu", (x,), out, bwd)


@_register
def sigmoid(x):
    x = as_tensor(x)
    # computed in both tails without overflow
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _finish("sigmoid", (x,), out, bwd)


@_register
def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _finish("softmax", (x,), out, bwd)


@_register
def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply a learned affine transform."""
    x = as_tensor(x)
    gamma = as_tensor(gamma, like=x)
    beta = as_tensor(beta, like=x)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match "
            f"feature width {x.shape[-1]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        return dx, dgamma, dbeta

    return _finish("layer_norm", (x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# convolutions and spatial ops
# ---------------------------------------------------------------------------

def _im2col(x, k, stride, padding):
    """Unfold a C x H x W array into (C*k*k) x (Ho*Wo) patches."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    s0, s1, s2 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (c, k, k, ho, wo), (s0, s1, s2, s1 * stride, s2 * stride)
    )
    return np.ascontiguousarray(view).reshape(c * k * k, ho * wo), ho, wo


def _conv2d_raw(x, w, stride, padding):
    f, c, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride, padding)
    out = (w.reshape(f, c * k * k) @ cols).reshape(f, ho, wo)
    return out, cols


def _conv2d_check(x, w, stride, padding):
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d: expects CxHxW and FxCxkxk, got {x.shape} / {w.shape}")
    f, c, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if x.shape[0] != c:
        raise ShapeError(f"conv2d: input channels {x.shape[0]} != kernel channels {c}")
    if padding > k - 1:
        raise ConfigError(f"conv2d: padding {padding} exceeds kernel support {k - 1}")
    for dim in (1, 2):
        span = x.shape[dim] + 2 * padding - k
        if span < 0 or span % stride != 0:
            raise ConfigError(
                f"conv2d: size {x.shape[dim]} with k={k} stride={stride} "
                f"padding={padding} gives a non-integral output size"
            )


@_register
def conv2d(x, w, stride=1, padding=0):
    """2-D cross-correlation of a CxHxW map with an FxCxkxk kernel stack."""
    x = as_tensor(x)
    w = as_tensor(w, like=x)
    stride = int(stride)
    padding = int(padding)
    _conv2d_check(x.data, w.data, stride, padding)
    f, c, k, _ = w.shape
    out, cols = _conv2d_raw(x.data, w.data, stride, padding)

    def bwd(g):
        ho, wo = g.shape[1], g.shape[2]
        dw = (g.reshape(f, ho * wo) @ cols.T).reshape(w.shape)
        # input gradient: dilate by the stride, then correlate with the
        # flipped kernel at full padding
        if stride > 1:
            gd = np.zeros(
                (f, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype
            )
            gd[:, ::stride, ::stride] = g
        else:
            gd = g
        wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = _conv2d_raw(gd, wf, 1, k - 1 - padding)
        return dx, dw

    return _finish("conv2d", (x, w), out, bwd)


@_register
def upconv2x2(x, w):
    """Transposed convolution with a 2x2 kernel and stride 2 (exact upsample).

    out[f, 2i+di, 2j+dj] = sum_c w[f, c, di, dj] * x[c, i, j]
    """
    x = as_tensor(x)
    w = as_tensor(w, like=x)
    if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ShapeError(f"upconv2x2: expects CxHxW and FxCx2x2, got {x.shape} / {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"upconv2x2: input channels {x.shape[0]} != kernel channels {w.shape[1]}")
    f = w.shape[0]
    c, h, wd = x.shape
    out = np.einsum("fcij,chw->fhiwj", w.data, x.data).reshape(f, 2 * h, 2 * wd)

    def bwd(g):
        gr = g.reshape(f, h, 2, wd, 2)
        dx = np.einsum("fcij,fhiwj->chw", w.data, gr)
        dw = np.einsum("chw,fhiwj->fcij", x.data, gr)
        return dx, dw

    return _finish("upconv2x2", (x, w), out, bwd)


@_register
def avgpool2x2(x):
    """Average pooling with a 2x2 window and stride 2 (exact halving)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"avgpool2x2 expects CxHxW, got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"avgpool2x2 needs even spatial sizes, got {h}x{w}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def bwd(g):
        spread = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2)
        return (spread * x.dtype.type(0.25),)

    return _finish("avgpool2x2", (x,), out, bwd)


@_register
def upsample_nearest2(x):
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"upsample_nearest2 expects CxHxW, got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    c, h, w = x.shape

    def bwd(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _finish("upsample_nearest2", (x,), out, bwd)


@_register
def max_axis(x, axis):
    """Maximum over one axis; gradient routes to the first maximal element."""
    x = as_tensor(x)
    axis = int(axis)
    out = x.data.max(axis=axis)
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx, np.expand_dims(g, axis), axis)
        return (dx,)

    return _finish("max_axis", (x,), out, bwd)


@_register
def bilinear_sample(fmap, points):
    """Sample a CxHxW map at continuous (row, col) points -> PxC.

    Points outside the map clamp to the border.
    """
    fmap = as_tensor(fmap)
    if fmap.ndim != 3:
        raise ShapeError(f"bilinear_sample expects CxHxW, got {fmap.shape}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(f"bilinear_sample expects Px2 points, got {pts.shape}")
    c, h, w = fmap.shape
    r = np.clip(pts[:, 0], 0.0, h - 1.0)
    cc = np.clip(pts[:, 1], 0.0, w - 1.0)
    r0 = np.clip(np.floor(r).astype(np.int64), 0, max(h - 2, 0))
    c0 = np.clip(np.floor(cc).astype(np.int64), 0, max(w - 2, 0))
    fr = (r - r0).astype(fmap.dtype)
    fc = (cc - c0).astype(fmap.dtype)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    flat = fmap.data.reshape(c, h * w)
    i00 = r0 * w + c0
    i01 = r0 * w + c1
    i10 = r1 * w + c0
    i11 = r1 * w + c1
    out = (
        flat[:, i00] * w00
        + flat[:, i01] * w01
        + flat[:, i10] * w10
        + flat[:, i11] * w11
    ).T

    def bwd(g):
        acc = np.zeros((h * w, c), dtype=fmap.dtype)
        np.add.at(acc, i00, g * w00[:, None])
        np.add.at(acc, i01, g * w01[:, None])
        np.add.at(acc, i10, g * w10[:, None])
        np.add.at(acc, i11, g * w11[:, None])
        return (acc.T.reshape(c, h, w),)

    return _finish("bilinear_sample", (fmap,), out, bwd)


@_register
def scatter_to_grid(features, rows, cols, height, width):
    """Place P feature rows at (row, col) cells of a zeroed CxHxW map."""
    features = as_tensor(features)
    if features.ndim != 2:
        raise ShapeError(f"scatter_to_grid expects PxC features, got {features.shape}")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.shape != cols.shape or rows.shape != (features.shape[0],):
        raise ShapeError("scatter_to_grid: coordinate arrays do not match feature count")
    if rows.size and (
        rows.min() < 0 or rows.max() >= height or cols.min() < 0 or cols.max() >= width
    ):
        raise UsageError("scatter_to_grid: coordinates outside the grid")
    lin = rows * width + cols
    if np.unique(lin).size != lin.size:
        raise InternalError("scatter_to_grid: duplicate cell coordinates")
    p, c = features.shape
    out = np.zeros((c, height, width), dtype=features.dtype)
    out.reshape(c, height * width)[:, lin] = features.data.T

    def bwd(g):
        return (g.reshape(c, height * width)[:, lin].T,)

    return _finish("scatter_to_grid", (features,), out, bwd)


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

@_register
def sum_all(x):
    x = as_tensor(x)
    out = x.data.sum()

    def bwd(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _finish("sum_all", (x,), out, bwd)


@_register
def mean_all(x):
    x = as_tensor(x)
    out = x.data.mean()
    inv = 1.0 / x.size

    def bwd(g):
        return (np.full(x.shape, g * x.dtype.type(inv), dtype=x.dtype),)

    return _finish("mean_all", (x,), out, bwd)


_FOCAL_EPS = 1e-7


@_register
def focal_loss(pred, target, alpha=2.0, beta=4.0):
    """Penalty-reduced pixel-wise focal loss for center heatmaps.

    ``target`` cells at exactly 1.0 are peaks; all other cells contribute the
    distance-discounted negative term. Normalized by the peak count (min 1).
    Predictions are clamped away from {0, 1}; the gradient is zero in the
    clamped range, matching the forward value.
    """
    pred = as_tensor(pred)
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ShapeError(f"focal_loss: shape mismatch {pred.shape} vs {target.shape}")
    t = target.data
    pos = t == 1.0
    n_pos = max(1.0, float(pos.sum()))
    pc = np.clip(pred.data, _FOCAL_EPS, 1.0 - _FOCAL_EPS)
    pos_term = ((1.0 - pc) ** alpha) * np.log(pc)
    neg_term = ((1.0 - t) ** beta) * (pc ** alpha) * np.log(1.0 - pc)
    out = -(pos_term[pos].sum() + neg_term[~pos].sum()) / pred.dtype.type(n_pos)

    def bwd(g):
        dpos = -alpha * (1.0 - pc) ** (alpha - 1.0) * np.log(pc) + ((1.0 - pc) ** alpha) / pc
        dneg = ((1.0 - t) ** beta) * (
            alpha * pc ** (alpha - 1.0) * np.log(1.0 - pc) - (pc ** alpha) / (1.0 - pc)
        )
        d = np.where(pos, dpos, dneg)
        d[(pred.data <= _FOCAL_EPS) | (pred.data >= 1.0 - _FOCAL_EPS)] = 0.0
        return (-(g / pred.dtype.type(n_pos)) * d.astype(pred.dtype), None)

    return _finish("focal_loss", (pred, target), out, bwd)


@_register
def l1_masked(pred, target, mask):
    """Mean absolute error over masked cells, normalized by the mask total.

    ``mask`` broadcasts against ``pred`` (one weight per spatial cell shared by
    all channels); the normalizer is sum(mask), floored at 1.
    """
    pred = as_tensor(pred)
    target = as_tensor(target, like=pred)
    mask = as_tensor(mask, like=pred)
    denom = max(1.0, float(mask.data.sum()))
    diff = (pred.data - target.data) * mask.data
    out = np.abs(diff).sum() / pred.dtype.type(denom)

    def bwd(g):
        d = np.sign(diff) * mask.data
        return ((g / pred.dtype.type(denom)) * d, None, None)

    return _finish("l1_masked", (pred, target, mask), out, bwd)
