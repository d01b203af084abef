"""Dense tensors with tape-based reverse-mode automatic differentiation.

Arrays are float32 by default. Every operation also works in float64 so
that gradient checks and numerically delicate verification runs can be
performed at higher precision; the op set is identical in both modes.
"""

from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float32

# Guard constants per precision. Probability-like clamps use 1e-6 in
# 32-bit mode; the 64-bit verification mode tightens them so that the
# clamp never dominates a finite-difference probe.
_EPS = {np.dtype(np.float32): 1e-6, np.dtype(np.float64): 1e-12}
_EXP_CAP = {np.dtype(np.float32): 80.0, np.dtype(np.float64): 700.0}


class ShapeError(ValueError):
    """Raised when operand shapes do not compose."""


class ConfigError(ValueError):
    """Raised for invalid option values (activation names, strides, ...)."""


def eps_for(dtype) -> float:
    return _EPS[np.dtype(dtype)]


class Tensor:
    """A numpy array plus a flag marking it as a differentiation leaf.

    Tensors themselves carry no graph structure; the active Tape records
    how each tensor was produced. A tensor with requires_grad=True that
    was not produced on the tape is treated as a leaf and receives an
    entry in the gradient map returned by Tape.backward.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


class _TapeStack(threading.local):
    def __init__(self):
        self.stack = []


_TAPES = _TapeStack()


def active_tape():
    """The innermost open tape on this thread, or None."""
    return _TAPES.stack[-1] if _TAPES.stack else None


class Gradients:
    """Read-only map from leaf tensor to its accumulated gradient array."""

    def __init__(self, by_id):
        self._by_id = by_id

    def get(self, tensor: Tensor, default=None):
        entry = self._by_id.get(id(tensor))
        return entry[1] if entry is not None else default

    def __getitem__(self, tensor: Tensor):
        g = self.get(tensor)
        if g is None:
            raise KeyError("no gradient recorded for this tensor")
        return g

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._by_id

    def __len__(self) -> int:
        return len(self._by_id)


class Tape:
    """Ordered record of executed primitives.

    Creation order is a valid topological order, so backward is a single
    reversed sweep. A tape is consumed by backward and cannot be reused;
    build a fresh graph per optimization step.
    """

    def __init__(self):
        self._nodes = []
        self._produced = set()
        self._consumed = False

    def __enter__(self):
        _TAPES.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.stack.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, inputs, backward_fn):
        if self._consumed:
            raise RuntimeError("tape already consumed by backward()")
        self._nodes.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> Gradients:
        """Accumulate d(loss)/d(leaf) for every requires_grad leaf."""
        if self._consumed:
            raise RuntimeError("tape already consumed by backward()")
        if loss.data.shape != ():
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        self._consumed = True

        grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
        leaves = {}
        if loss.requires_grad and id(loss) not in self._produced:
            leaves[id(loss)] = (loss, np.ones((), dtype=loss.data.dtype))

        # Nodes are dropped as the sweep passes them so the activations
        # they hold can be reclaimed mid-backward; long unrolled graphs
        # would otherwise peak at twice their forward footprint.
        nodes, self._nodes = self._nodes, []
        for i in range(len(nodes) - 1, -1, -1):
            out, inputs, backward_fn = nodes[i]
            nodes[i] = None
            g = grads.pop(id(out), None)
            if g is None:
                continue
            input_grads = backward_fn(g)
            for tensor, gt in zip(inputs, input_grads):
                if gt is None or not tensor.requires_grad:
                    continue
                if id(tensor) in self._produced:
                    prev = grads.get(id(tensor))
                    grads[id(tensor)] = gt if prev is None else prev + gt
                else:
                    prev = leaves.get(id(tensor))
                    if prev is None:
                        leaves[id(tensor)] = (tensor, gt)
                    else:
                        leaves[id(tensor)] = (tensor, prev[1] + gt)
        return Gradients(leaves)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap x as a constant Tensor, matching the dtype of `like` if given."""
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), requires_grad=False, dtype=dtype)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    return as_tensor(a, like=b), b


def _record(out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(grad.shape, shape)) if s == 1 and gs != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def div(a, b) -> Tensor:
    """Elementwise division with the denominator floored away from zero."""
    a, b = _pair(a, b)
    eps = eps_for(b.data.dtype)
    denom = np.where(np.abs(b.data) < eps, np.copysign(eps, b.data), b.data)
    out = a.data / denom

    def backward(g):
        ga = _unbroadcast(g / denom, a.data.shape)
        gb = _unbroadcast(-g * a.data / (denom * denom), b.data.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} and {b.data.shape} do not compose")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), backward)


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.data.shape),)

    return _record(out, (x,), backward)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.data.ndim)
    count = 1
    for ax in axes:
        count *= x.data.shape[ax]
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.data.shape) / count,)

    return _record(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return _record(out, (x,), lambda g: (g.reshape(x.data.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swap_last_two(x: Tensor) -> Tensor:
    """Transpose the trailing two axes, keeping any leading batch axes."""
    perm = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    return transpose(x, perm)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = axis % tensors[0].data.ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), backward)


def log(x) -> Tensor:
    """Natural log of max(x, eps); the clamp keeps 32-bit graphs finite."""
    x = as_tensor(x)
    eps = eps_for(x.data.dtype)
    safe = np.maximum(x.data, eps)
    out = np.log(safe)

    def backward(g):
        return (np.where(x.data >= eps, g / safe, 0.0),)

    return _record(out, (x,), backward)


def exp(x) -> Tensor:
    """Exponential with the argument capped to avoid overflow to inf."""
    x = as_tensor(x)
    cap = _EXP_CAP[x.data.dtype]
    out = np.exp(np.minimum(x.data, cap))

    def backward(g):
        return (np.where(x.data <= cap, g * out, 0.0),)

    return _record(out, (x,), backward)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    eps = eps_for(x.data.dtype)
    out = np.sqrt(np.maximum(x.data, 0.0))

    def backward(g):
        return (np.where(x.data > 0, g / (2.0 * np.maximum(out, eps)), 0.0),)

    return _record(out, (x,), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input lies inside."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * mask,)

    return _record(out, (x,), backward)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select a where mask else b. The mask is a constant boolean array."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.where(mask, g, 0.0), a.data.shape)
        gb = _unbroadcast(np.where(mask, 0.0, g), b.data.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass, zero gradient in the backward pass.

    Shares the input's array, so the forward value is bit-identical.
    """
    x = as_tensor(x)
    return Tensor(x.data, requires_grad=False)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


def elu(x) -> Tensor:
    # alpha is fixed at 1 so the output derivative is (y + 1) on the
    # negative branch.
    x = as_tensor(x)
    out = np.where(x.data > 0, x.data, np.expm1(x.data))

    def backward(g):
        return (np.where(x.data > 0, g, g * (out + 1.0)),)

    return _record(out, (x,), backward)


_ACTIVATIONS = {
    "sigmoid": sigmoid,
    "relu": relu,
    "elu": elu,
    "linear": lambda x: x,
}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation '{kind}'") from None
    return fn(as_tensor(x))


def activation_output_derivative(y: Tensor, kind: str) -> Tensor | None:
    """d(act)/d(pre-activation) expressed through the activation's output.

    Returns None for the linear activation (derivative 1). Used by the
    closed-form decoder backprop, which only sees layer outputs.
    """
    if kind == "sigmoid":
        return mul(y, sub(1.0, y))
    if kind == "linear":
        return None
    if kind == "relu":
        return Tensor((y.data > 0).astype(y.data.dtype))
    if kind == "elu":
        return where(y.data > 0, as_tensor(np.ones((), dtype=y.data.dtype)), add(y, 1.0))
    raise ConfigError(f"unknown activation '{kind}'")


def layer_norm(x: Tensor, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over all non-batch axes to zero mean and unit variance.

    A 1-D input is treated as a single feature vector; higher-rank inputs
    treat axis 0 as the batch. Gain and bias may be scalars or match the
    feature size. Variance is the biased estimate.
    """
    x = as_tensor(x)
    gain = as_tensor(gain, like=x)
    bias = as_tensor(bias, like=x)

    if x.data.ndim == 0:
        raise ShapeError("layer_norm needs at least one feature axis")
    if x.data.ndim == 1:
        n, feat_shape = 1, x.data.shape
    else:
        n, feat_shape = x.data.shape[0], x.data.shape[1:]
    f = int(np.prod(feat_shape))
    if f < 2:
        raise ShapeError(f"layer_norm needs >=2 features, got feature shape {feat_shape}")

    xf = x.data.reshape(n, f)
    mu = xf.mean(axis=1, keepdims=True)
    centered = xf - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = centered * inv

    def flat(t):
        if t.data.ndim == 0:
            return t.data
        if t.data.size == f:
            return t.data.reshape(1, f)
        raise ShapeError(f"gain/bias shape {t.data.shape} does not match feature shape {feat_shape}")

    gf, bf = flat(gain), flat(bias)
    out = (xhat * gf + bf).reshape(x.data.shape)

    def backward(g):
        g2 = g.reshape(n, f)
        dxhat = g2 * gf
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        dgain = (g2 * xhat).sum(axis=0) if gain.data.ndim else (g2 * xhat).sum()
        dbias = g2.sum(axis=0) if bias.data.ndim else g2.sum()
        if gain.data.ndim:
            dgain = dgain.reshape(gain.data.shape)
        if bias.data.ndim:
            dbias = dbias.reshape(bias.data.shape)
        return dx.reshape(x.data.shape), dgain, dbias

    return _record(out, (x, gain, bias), backward)


def _same_pad(size: int, k: int, stride: int):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return out, lo, total - lo


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """2-D convolution with half padding (output extent = ceil(in/stride)).

    x is (N, C, H, W) or (C, H, W); kernel is (C_out, C_in, kh, kw).
    When the required padding is odd, the extra row/column goes on the
    bottom/right.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if stride not in (1, 2):
        raise ConfigError(f"conv2d stride must be 1 or 2, got {stride}")
    squeezed = x.data.ndim == 3
    xd = x.data[None] if squeezed else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.data.shape} and {kernel.data.shape}")
    n, c, h, w = xd.shape
    c_out, c_in, kh, kw = kernel.data.shape
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {xd.shape} vs kernel {kernel.data.shape}")

    h_out, pt, pb = _same_pad(h, kh, stride)
    w_out, pl, pr = _same_pad(w, kw, stride)

    def im2col(padded):
        cols = np.empty((n, c, kh, kw, h_out, w_out), dtype=padded.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = padded[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
        return cols.reshape(n, c * kh * kw, h_out * w_out)

    w2 = kernel.data.reshape(c_out, c * kh * kw)
    out = (w2 @ im2col(np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))))).reshape(
        n, c_out, h_out, w_out
    )
    if squeezed:
        out = out[0]

    # The column matrix dwarfs the activations on the wide decoder convs,
    # so backward never captures it; it recomputes whichever column form
    # is smaller for the layer at hand.
    def backward(g):
        g4 = np.ascontiguousarray(g[None] if squeezed else g)
        g2 = g4.reshape(n, c_out, h_out * w_out)
        xd_b = x.data[None] if squeezed else x.data
        xp_b = np.pad(xd_b, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        hf, wf = h_out + kh - 1, w_out + kw - 1
        if stride == 1 and c_out * hf * wf < c * h_out * w_out:
            # Few output channels (decoder half): columns of the output
            # gradient are far smaller than columns of the input, so take
            # dx as a full correlation with the flipped kernel and reuse
            # the same columns against the padded input for dw. Stride-1
            # half padding makes the padded input extent equal hf x wf.
            gp = np.pad(g4, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            cols_g = np.empty((n, c_out, kh, kw, hf, wf), dtype=gp.dtype)
            for i in range(kh):
                for j in range(kw):
                    cols_g[:, :, i, j] = gp[:, :, i : i + hf, j : j + wf]
            cols_g = cols_g.reshape(n, c_out * kh * kw, hf * wf)
            wt = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, c_out * kh * kw)
            dxp = (wt @ cols_g).reshape(n, c, hf, wf)
            dx = dxp[:, :, pt : pt + h, pl : pl + w]
            xp2 = xp_b.reshape(n, c, hf * wf).transpose(0, 2, 1)
            dw4 = np.matmul(cols_g, xp2).sum(axis=0).reshape(c_out, kh, kw, c)
            dw = np.ascontiguousarray(dw4[:, ::-1, ::-1, :].transpose(0, 3, 1, 2))
        else:
            cols = im2col(xp_b)
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.data.shape)
            del cols
            dcols = (w2.T @ g2).reshape(n, c, kh, kw, h_out, w_out)
            dxp = np.zeros_like(xp_b)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += dcols[:, :, i, j]
            dx = dxp[:, :, pt : pt + h, pl : pl + w]
        return (dx[0] if squeezed else dx), dw

    return _record(out, (x, kernel), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Duplicate each pixel into a 2x2 block on the last two axes."""
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"upsample_nearest2x needs spatial axes, got shape {x.data.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def backward(g):
        lead = g.shape[:-2]
        h2, w2 = g.shape[-2:]
        return (g.reshape(*lead, h2 // 2, 2, w2 // 2, 2).sum(axis=(-3, -1)),)

    return _record(out, (x,), backward)


def logsumexp(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp along one axis, built from taped primitives.

    The subtracted maximum is treated as a constant; this leaves both the
    value and the gradient exact.
    """
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = sub(x, Tensor(m))
    total = reduce_sum(exp(shifted), axis=axis, keepdims=True)
    out = add(log(total), Tensor(m))
    if not keepdims:
        shape = list(x.data.shape)
        del shape[axis % x.data.ndim]
        out = reshape(out, shape)
    return out
