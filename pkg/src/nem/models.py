"""Network descriptions, parameter storage, optimizer, and checkpoints.

A NetworkSpec is a flat tuple of layer descriptors that maps a (B, D)
pixel batch back to a (B, D) prediction, with at most one recurrent layer
in the middle. The same spec drives shape validation, parameter
initialization, and the forward pass, so the three cannot drift apart.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ShapeError, Tensor

KERNEL = 4  # conv kernels are 4x4 throughout


@dataclass(frozen=True)
class Squash:
    """Elementwise activation applied to the raw input (no parameters)."""

    activation: str = "sigmoid"


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    activation: str = "linear"
    layer_norm: bool = False


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    stride: int = 1
    activation: str = "linear"
    layer_norm: bool = False


@dataclass(frozen=True)
class Upsample2x:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Unflatten:
    channels: int
    height: int
    width: int


@dataclass(frozen=True)
class Recurrent:
    """Sigmoid recurrence h' = sigmoid(W_x in + W_h h + b).

    When layer_norm_out is set, normalization applies to the emitted
    output only; the state fed back at the next step is the raw h'.
    """

    in_dim: int
    hidden: int
    layer_norm_out: bool = False


Layer = Squash | Dense | Conv | Upsample2x | Flatten | Unflatten | Recurrent


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        recurrent = [l for l in self.layers if isinstance(l, Recurrent)]
        if len(recurrent) > 1:
            raise ConfigError("at most one recurrent layer is supported")
        self.shapes()  # validate composition eagerly

    @property
    def recurrent_index(self) -> int | None:
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Recurrent):
                return i
        return None

    @property
    def hidden_size(self) -> int:
        """State size carried between steps: recurrent width, or the input
        width of the first dense layer for feed-forward decoders."""
        idx = self.recurrent_index
        if idx is not None:
            return self.layers[idx].hidden
        for layer in self.layers:
            if isinstance(layer, Dense):
                return layer.in_dim
        raise ConfigError("cannot infer state size for this spec")

    def shapes(self) -> list:
        """Output shape after each layer; ints for flat, (C, H, W) for maps.

        The walk starts from the first layer's declared input and raises
        ShapeError on any mismatch, so constructing a NetworkSpec proves
        the chain composes.
        """
        first = self.layers[0]
        if isinstance(first, Dense):
            cur = first.in_dim
        elif isinstance(first, Recurrent):
            cur = first.in_dim
        elif isinstance(first, Unflatten):
            cur = first.channels * first.height * first.width
        elif isinstance(first, Squash):
            cur = None  # fixed by the next layer
        else:
            raise ConfigError(f"spec cannot start with {type(first).__name__}")

        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Squash):
                if cur is None and i + 1 < len(self.layers):
                    nxt = self.layers[i + 1]
                    cur = nxt.in_dim if isinstance(nxt, (Dense, Recurrent)) else None
                if cur is None:
                    raise ConfigError("squash layer needs a following sized layer")
            elif isinstance(layer, (Dense, Recurrent)):
                if not isinstance(cur, int) or cur != layer.in_dim:
                    raise ShapeError(f"layer {i}: expected flat input {layer.in_dim}, have {cur}")
                cur = layer.out_dim if isinstance(layer, Dense) else layer.hidden
            elif isinstance(layer, Conv):
                if not isinstance(cur, tuple) or cur[0] != layer.in_ch:
                    raise ShapeError(f"layer {i}: expected {layer.in_ch}-channel map, have {cur}")
                c, h, w = cur
                cur = (layer.out_ch, -(-h // layer.stride), -(-w // layer.stride))
            elif isinstance(layer, Upsample2x):
                if not isinstance(cur, tuple):
                    raise ShapeError(f"layer {i}: upsample needs a spatial map, have {cur}")
                c, h, w = cur
                cur = (c, 2 * h, 2 * w)
            elif isinstance(layer, Flatten):
                if not isinstance(cur, tuple):
                    raise ShapeError(f"layer {i}: flatten needs a spatial map, have {cur}")
                cur = int(np.prod(cur))
            elif isinstance(layer, Unflatten):
                want = layer.channels * layer.height * layer.width
                if cur is not None and cur != want:
                    raise ShapeError(f"layer {i}: cannot reshape {cur} features into {want}")
                cur = (layer.channels, layer.height, layer.width)
            out.append(cur)
        return out


def build_static_decoder(latent: int = 250, out_dim: int = 784) -> NetworkSpec:
    """Fully-connected decoder for single-image runs.

    The raw parameter vector is squashed through a sigmoid before the
    dense layer, so the optimized quantity lives in an unbounded space
    while the decoder input stays in (0, 1).
    """
    return NetworkSpec((Squash("sigmoid"), Dense(latent, out_dim, activation="sigmoid")))


def build_rnn_cell(in_dim: int, hidden: int, layer_norm_out: bool = False) -> NetworkSpec:
    return NetworkSpec((Recurrent(in_dim, hidden, layer_norm_out),))


def build_static_rnn(out_dim: int = 784, hidden: int = 250) -> NetworkSpec:
    """Recurrent encoder-decoder for single images: cell plus dense head."""
    return NetworkSpec(
        (Recurrent(out_dim, hidden), Dense(hidden, out_dim, activation="sigmoid"))
    )


def build_conv_encdec(variant: str) -> NetworkSpec:
    """Convolutional recurrent encoder-decoders for image sequences.

    'shapes' expects 28x28 binary frames; 'mnist' expects 24x24 grayscale
    frames, has one more conv stage, a wider recurrence, and a linear
    output head.
    """
    if variant == "shapes":
        return NetworkSpec(
            (
                Unflatten(1, 28, 28),
                Conv(1, 32, stride=2, activation="elu", layer_norm=True),
                Conv(32, 64, stride=2, activation="elu", layer_norm=True),
                Flatten(),
                Dense(64 * 7 * 7, 512, activation="elu", layer_norm=True),
                Recurrent(512, 100, layer_norm_out=True),
                Dense(100, 512, activation="relu", layer_norm=True),
                Dense(512, 64 * 7 * 7, activation="relu", layer_norm=True),
                Unflatten(64, 7, 7),
                Upsample2x(),
                Conv(64, 32, stride=1, activation="relu", layer_norm=True),
                Upsample2x(),
                Conv(32, 1, stride=1, activation="sigmoid"),
                Flatten(),
            )
        )
    if variant == "mnist":
        return NetworkSpec(
            (
                Unflatten(1, 24, 24),
                Conv(1, 32, stride=2, activation="elu", layer_norm=True),
                Conv(32, 64, stride=2, activation="elu", layer_norm=True),
                Conv(64, 128, stride=2, activation="elu", layer_norm=True),
                Flatten(),
                Dense(128 * 3 * 3, 512, activation="elu", layer_norm=True),
                Recurrent(512, 250, layer_norm_out=True),
                Dense(250, 512, activation="relu", layer_norm=True),
                Dense(512, 128 * 3 * 3, activation="relu", layer_norm=True),
                Unflatten(128, 3, 3),
                Upsample2x(),
                Conv(128, 64, stride=1, activation="relu", layer_norm=True),
                Upsample2x(),
                Conv(64, 32, stride=1, activation="relu", layer_norm=True),
                Upsample2x(),
                Conv(32, 1, stride=1, activation="linear"),
                Flatten(),
            )
        )
    raise ConfigError(f"unknown conv encoder-decoder variant '{variant}'")


class ParameterStore:
    """Named, insertion-ordered trainable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name '{name}'")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def restore(self, arrays: dict[str, np.ndarray]):
        for k, t in self._params.items():
            t.data = arrays[k].copy()


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def orthogonal(rng: np.random.Generator, n: int, dtype):
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    # fix the signs so the factorization (hence the init) is unique
    q = q * np.sign(np.diag(r))
    return q.astype(dtype)


def init_parameters(spec: NetworkSpec, seed: int, dtype=np.float32) -> ParameterStore:
    """Glorot-uniform weights, zero biases, orthogonal recurrence, unit
    layer-norm gains. Parameter names follow 'layer<i>.<field>'."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    store = ParameterStore()
    shapes = spec.shapes()
    for i, layer in enumerate(spec.layers):
        prefix = f"layer{i}"
        if isinstance(layer, Dense):
            w = glorot_uniform(rng, layer.in_dim, layer.out_dim, (layer.in_dim, layer.out_dim), dtype)
            store.add(f"{prefix}.w", Tensor(w))
            store.add(f"{prefix}.b", Tensor(np.zeros(layer.out_dim, dtype=dtype)))
            if layer.layer_norm:
                store.add(f"{prefix}.ln_g", Tensor(np.ones(layer.out_dim, dtype=dtype)))
                store.add(f"{prefix}.ln_b", Tensor(np.zeros(layer.out_dim, dtype=dtype)))
        elif isinstance(layer, Conv):
            fan_in = layer.in_ch * KERNEL * KERNEL
            fan_out = layer.out_ch * KERNEL * KERNEL
            w = glorot_uniform(rng, fan_in, fan_out, (layer.out_ch, layer.in_ch, KERNEL, KERNEL), dtype)
            store.add(f"{prefix}.w", Tensor(w))
            store.add(f"{prefix}.b", Tensor(np.zeros((layer.out_ch, 1, 1), dtype=dtype)))
            if layer.layer_norm:
                c, h, w_ = shapes[i]
                store.add(f"{prefix}.ln_g", Tensor(np.ones((c, h, w_), dtype=dtype)))
                store.add(f"{prefix}.ln_b", Tensor(np.zeros((c, h, w_), dtype=dtype)))
        elif isinstance(layer, Recurrent):
            wx = glorot_uniform(rng, layer.in_dim, layer.hidden, (layer.in_dim, layer.hidden), dtype)
            store.add(f"{prefix}.wx", Tensor(wx))
            store.add(f"{prefix}.wh", Tensor(orthogonal(rng, layer.hidden, dtype)))
            store.add(f"{prefix}.b", Tensor(np.zeros(layer.hidden, dtype=dtype)))
            if layer.layer_norm_out:
                store.add(f"{prefix}.ln_g", Tensor(np.ones(layer.hidden, dtype=dtype)))
                store.add(f"{prefix}.ln_b", Tensor(np.zeros(layer.hidden, dtype=dtype)))
    return store


def apply_layer(layer: Layer, index: int, params: ParameterStore, x: Tensor) -> Tensor:
    prefix = f"layer{index}"
    if isinstance(layer, Squash):
        return T.activation(x, layer.activation)
    if isinstance(layer, Dense):
        y = T.add(T.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])
        if layer.layer_norm:
            y = T.layer_norm(y, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])
        return T.activation(y, layer.activation)
    if isinstance(layer, Conv):
        y = T.add(T.conv2d(x, params[f"{prefix}.w"], stride=layer.stride), params[f"{prefix}.b"])
        if layer.layer_norm:
            y = T.layer_norm(y, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])
        return T.activation(y, layer.activation)
    if isinstance(layer, Upsample2x):
        return T.upsample_nearest2x(x)
    if isinstance(layer, Flatten):
        return T.reshape(x, (x.shape[0], -1) if x.ndim > 1 else (-1,))
    if isinstance(layer, Unflatten):
        lead = (x.shape[0],) if x.ndim > 1 else ()
        return T.reshape(x, lead + (layer.channels, layer.height, layer.width))
    raise ConfigError(f"cannot apply layer {type(layer).__name__} here")


def cell_step(spec: NetworkSpec, params: ParameterStore, inp: Tensor, h_prev: Tensor):
    """One recurrence update. Returns (new state, emitted output)."""
    idx = spec.recurrent_index
    if idx is None:
        raise ConfigError("spec has no recurrent layer")
    layer = spec.layers[idx]
    prefix = f"layer{idx}"
    pre = T.add(
        T.add(T.matmul(inp, params[f"{prefix}.wx"]), T.matmul(h_prev, params[f"{prefix}.wh"])),
        params[f"{prefix}.b"],
    )
    h = T.sigmoid(pre)
    out = h
    if layer.layer_norm_out:
        out = T.layer_norm(h, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])
    return h, out


def cell_output(spec: NetworkSpec, params: ParameterStore, h: Tensor) -> Tensor:
    """The emitted output for a given state, without advancing it."""
    idx = spec.recurrent_index
    if idx is None:
        raise ConfigError("spec has no recurrent layer")
    layer = spec.layers[idx]
    if layer.layer_norm_out:
        return T.layer_norm(h, params[f"layer{idx}.ln_g"], params[f"layer{idx}.ln_b"])
    return h


def encode(spec: NetworkSpec, params: ParameterStore, x: Tensor) -> Tensor:
    """Apply every layer before the recurrence (identity if none)."""
    idx = spec.recurrent_index
    stop = idx if idx is not None else 0
    for i in range(stop):
        x = apply_layer(spec.layers[i], i, params, x)
    return x


def decode(spec: NetworkSpec, params: ParameterStore, h: Tensor) -> Tensor:
    """Apply every layer after the recurrence (the whole spec if none)."""
    idx = spec.recurrent_index
    start = idx + 1 if idx is not None else 0
    for i in range(start, len(spec.layers)):
        h = apply_layer(spec.layers[i], i, params, h)
    return h


def forward(spec: NetworkSpec, params: ParameterStore, x: Tensor, h_prev: Tensor | None = None):
    """Full pass through the spec. Returns (output, new state or None)."""
    if spec.recurrent_index is None:
        return decode(spec, params, x), None
    enc = encode(spec, params, x)
    h, out = cell_step(spec, params, enc, h_prev)
    return decode(spec, params, out), h


class AdamState:
    """First/second moment accumulators, keyed like the parameter store."""

    def __init__(self, store: ParameterStore):
        self.m = {k: np.zeros_like(t.data) for k, t in store.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in store.items()}
        self.t = 0


def adam_step(
    store: ParameterStore,
    grads,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """In-place Adam update. Parameters without a gradient are skipped;
    a non-finite gradient aborts with the parameter's name."""
    state.t += 1
    t = state.t
    for name, param in store.items():
        g = grads.get(param)
        if g is None:
            continue
        g = np.asarray(g, dtype=param.data.dtype)
        if not np.all(np.isfinite(g)):
            raise RuntimeError(f"non-finite gradient for parameter '{name}' at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        param.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.data.dtype)


CHECKPOINT_MAGIC = b"NEMC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, store: ParameterStore):
    """Write parameters as float32 in a fixed little-endian layout."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(store)))
        for name, tensor in store.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            arr = tensor.data.astype("<f4", copy=False)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> ParameterStore:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r} at byte 0")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 12
    store = ParameterStore()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset += 4 * size
        store.add(name, Tensor(arr.copy()))
    if offset != len(blob):
        raise ValueError(f"trailing bytes after checkpoint payload at byte {offset}")
    return store
