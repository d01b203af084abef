"""Dataset generators, corruption processes, and binary container formats.

Every generator is a pure function of its parameters and seed: sample i
derives its own sub-seed from (seed, i), so generation order (or
parallelism) cannot change the bytes produced.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError


class FormatError(ValueError):
    """Raised when an on-disk artifact does not match its format."""


FRAME_SIZE = 28  # shapes datasets
MNIST_FRAME_SIZE = 24
SPRITE_SIZE = 8
GT_THRESHOLD = 0.1


def _triangle_up() -> np.ndarray:
    mask = np.zeros((SPRITE_SIZE, SPRITE_SIZE), dtype=np.int16)
    for r in range(SPRITE_SIZE):
        margin = (SPRITE_SIZE - 1 - r) // 2
        mask[r, margin : SPRITE_SIZE - margin] = 1
    return mask


SPRITE_KINDS = ("triangle_up", "triangle_down", "square")
SPRITES = {
    "triangle_up": _triangle_up(),
    "triangle_down": _triangle_up()[::-1].copy(),
    "square": np.ones((SPRITE_SIZE, SPRITE_SIZE), dtype=np.int16),
}


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"  # none | bitflip | masked_uniform
    p: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "bitflip", "masked_uniform"):
            raise ConfigError(f"unknown noise kind '{self.kind}'")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"noise probability must lie in [0, 1], got {self.p}")


@dataclass
class SequenceSample:
    """frames: (T, H, W) float32 in [0, 1]; gt: (T, H, W) int16 labels
    with 0 = background, -1 = overlap, 1..N = object id."""

    frames: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        self.gt = np.ascontiguousarray(self.gt, dtype=np.int16)
        if self.frames.ndim != 3 or self.frames.shape != self.gt.shape:
            raise FormatError(
                f"frames {self.frames.shape} and gt {self.gt.shape} must be matching (T, H, W)"
            )


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _labels_from_layers(layers: list[np.ndarray]) -> np.ndarray:
    count = np.zeros(layers[0].shape, dtype=np.int16)
    for layer in layers:
        count += layer.astype(np.int16)
    gt = np.zeros(layers[0].shape, dtype=np.int16)
    for oid, layer in enumerate(layers, start=1):
        gt[layer & (count == 1)] = oid
    gt[count >= 2] = -1
    return gt


def gen_static_shapes(n: int, seed: int) -> list[SequenceSample]:
    """Single binary frames holding three randomly placed sprites."""
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")
    samples = []
    maxpos = FRAME_SIZE - SPRITE_SIZE
    for i in range(n):
        rng = _sample_rng(seed, i)
        kinds = rng.integers(0, len(SPRITE_KINDS), size=3)
        tops = rng.integers(0, maxpos + 1, size=3)
        lefts = rng.integers(0, maxpos + 1, size=3)
        layers = []
        for kind, top, left in zip(kinds, tops, lefts):
            layer = np.zeros((FRAME_SIZE, FRAME_SIZE), dtype=bool)
            mask = SPRITES[SPRITE_KINDS[kind]]
            layer[top : top + SPRITE_SIZE, left : left + SPRITE_SIZE] = mask > 0
            layers.append(layer)
        frame = np.zeros((FRAME_SIZE, FRAME_SIZE), dtype=np.float32)
        for layer in layers:
            frame[layer] = 1.0
        gt = _labels_from_layers(layers)
        samples.append(SequenceSample(frame[None], gt[None]))
    return samples


def _sample_velocity(rng: np.random.Generator, dims: int = 2) -> np.ndarray:
    # uniform in [-2, 2] per component, rejecting the all-zero vector
    while True:
        v = rng.uniform(-2.0, 2.0, size=dims)
        if np.any(v != 0.0):
            return v


def _advance(pos: np.ndarray, vel: np.ndarray, maxpos: float):
    """One trajectory step: clamp at the walls and reverse velocity."""
    pos = pos + vel
    vel = vel.copy()
    for ax in range(pos.shape[0]):
        if pos[ax] < 0.0:
            pos[ax] = 0.0
            vel[ax] = -vel[ax]
        elif pos[ax] > maxpos:
            pos[ax] = maxpos
            vel[ax] = -vel[ax]
    return pos, vel


def _round_pos(p: float) -> int:
    return int(np.floor(p + 0.5))


def gen_flying_shapes(n: int, num_objects: int, t: int, seed: int) -> list[SequenceSample]:
    """Binary sequences of sprites bouncing off the frame walls."""
    if n < 1 or num_objects < 1 or t < 1:
        raise ConfigError(f"need n, num_objects, t >= 1, got {n}, {num_objects}, {t}")
    maxpos = FRAME_SIZE - SPRITE_SIZE
    samples = []
    for i in range(n):
        rng = _sample_rng(seed, i)
        kinds = rng.integers(0, len(SPRITE_KINDS), size=num_objects)
        positions = [rng.uniform(0.0, maxpos, size=2) for _ in range(num_objects)]
        velocities = [_sample_velocity(rng) for _ in range(num_objects)]
        frames = np.zeros((t, FRAME_SIZE, FRAME_SIZE), dtype=np.float32)
        gt = np.zeros((t, FRAME_SIZE, FRAME_SIZE), dtype=np.int16)
        for ft in range(t):
            layers = []
            for obj in range(num_objects):
                top = _round_pos(positions[obj][0])
                left = _round_pos(positions[obj][1])
                layer = np.zeros((FRAME_SIZE, FRAME_SIZE), dtype=bool)
                mask = SPRITES[SPRITE_KINDS[kinds[obj]]]
                layer[top : top + SPRITE_SIZE, left : left + SPRITE_SIZE] = mask > 0
                layers.append(layer)
            frame = np.zeros((FRAME_SIZE, FRAME_SIZE), dtype=np.float32)
            for layer in layers:
                frame[layer] = 1.0
            frames[ft] = frame
            gt[ft] = _labels_from_layers(layers)
            for obj in range(num_objects):
                positions[obj], velocities[obj] = _advance(positions[obj], velocities[obj], maxpos)
        samples.append(SequenceSample(frames, gt))
    return samples


def _mean_pool2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def gen_flying_mnist(
    n: int, num_digits: int, t: int, digit_pool: np.ndarray, seed: int
) -> list[SequenceSample]:
    """Grayscale sequences of half-size digits bouncing inside a 24x24 frame.

    Frames are composited with a pixelwise max; a pixel's label is the
    digit whose rendering exceeds 0.1 there, background if none does and
    overlap (-1) if several do.
    """
    if digit_pool is None or len(digit_pool) == 0:
        raise ConfigError("digit pool is empty; load MNIST images first")
    if n < 1 or num_digits < 1 or t < 1:
        raise ConfigError(f"need n, num_digits, t >= 1, got {n}, {num_digits}, {t}")
    digit_size = digit_pool.shape[-1] // 2
    maxpos = MNIST_FRAME_SIZE - digit_size
    samples = []
    for i in range(n):
        rng = _sample_rng(seed, i)
        picks = rng.integers(0, len(digit_pool), size=num_digits)
        digits = [_mean_pool2(np.asarray(digit_pool[p], dtype=np.float64)) for p in picks]
        positions = [rng.uniform(0.0, maxpos, size=2) for _ in range(num_digits)]
        velocities = [_sample_velocity(rng) for _ in range(num_digits)]
        frames = np.zeros((t, MNIST_FRAME_SIZE, MNIST_FRAME_SIZE), dtype=np.float32)
        gt = np.zeros((t, MNIST_FRAME_SIZE, MNIST_FRAME_SIZE), dtype=np.int16)
        for ft in range(t):
            renders = []
            for obj in range(num_digits):
                top = _round_pos(positions[obj][0])
                left = _round_pos(positions[obj][1])
                canvas = np.zeros((MNIST_FRAME_SIZE, MNIST_FRAME_SIZE), dtype=np.float64)
                canvas[top : top + digit_size, left : left + digit_size] = digits[obj]
                renders.append(canvas)
            frames[ft] = np.clip(np.max(renders, axis=0), 0.0, 1.0)
            gt[ft] = _labels_from_layers([r > GT_THRESHOLD for r in renders])
            for obj in range(num_digits):
                positions[obj], velocities[obj] = _advance(positions[obj], velocities[obj], maxpos)
        samples.append(SequenceSample(frames, gt))
    return samples


def bitflip_noise(frame: np.ndarray, p: float, rng) -> np.ndarray:
    """Flip each binary pixel independently with probability p."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    flips = rng.random(frame.shape) < p
    return np.where(flips, 1.0 - frame, frame).astype(frame.dtype)


def masked_uniform_noise(frame: np.ndarray, p: float, rng) -> np.ndarray:
    """Replace a Bernoulli(p) mask of pixels with Uniform(0, 1) draws.

    The mask is drawn first, then one uniform per pixel, so the stream
    layout does not depend on p.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    mask = rng.random(frame.shape) < p
    u = rng.random(frame.shape)
    return np.where(mask, u, frame).astype(frame.dtype)


def apply_noise(frame: np.ndarray, noise: NoiseSpec, rng) -> np.ndarray:
    if noise.kind == "none":
        return frame
    if noise.kind == "bitflip":
        return bitflip_noise(frame, noise.p, rng)
    return masked_uniform_noise(frame, noise.p, rng)


IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


def load_idx(path) -> np.ndarray:
    """Parse a big-endian IDX file: images scaled to [0,1], labels as ints."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise FormatError(f"truncated IDX file: header ends at byte {len(blob)}")
    magic = struct.unpack_from(">I", blob, 0)[0]
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise FormatError(f"bad IDX magic {magic} at byte 0")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"truncated IDX file: dimensions end at byte {len(blob)}")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    expected = header + int(np.prod(dims))
    if len(blob) != expected:
        raise FormatError(
            f"IDX payload size mismatch: expected {expected} bytes, file ends at byte {len(blob)}"
        )
    data = np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)
    if magic == IDX_IMAGES_MAGIC:
        return (data.astype(np.float32) / 255.0).reshape(dims)
    return data.astype(np.int64)


DATASET_MAGIC = b"NEMD"
DATASET_VERSION = 1


def write_dataset(path, samples: list[SequenceSample]):
    """Fixed little-endian container; round-trips bit-exactly."""
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<II", DATASET_VERSION, len(samples)))
        for sample in samples:
            t, h, w = sample.frames.shape
            f.write(struct.pack("<HHH", t, h, w))
            f.write(sample.frames.astype("<f4", copy=False).tobytes(order="C"))
            f.write(sample.gt.astype("<i2", copy=False).tobytes(order="C"))


def read_dataset(path) -> list[SequenceSample]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {blob[:4]!r} at byte 0")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    offset = 12
    samples = []
    for i in range(count):
        if offset + 6 > len(blob):
            raise FormatError(f"truncated dataset: sample {i} header at byte {offset}")
        t, h, w = struct.unpack_from("<HHH", blob, offset)
        offset += 6
        n = t * h * w
        if offset + 4 * n + 2 * n > len(blob):
            raise FormatError(f"truncated dataset: sample {i} payload at byte {offset}")
        frames = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(t, h, w)
        offset += 4 * n
        gt = np.frombuffer(blob, dtype="<i2", count=n, offset=offset).reshape(t, h, w)
        offset += 2 * n
        samples.append(SequenceSample(frames.copy(), gt.copy()))
    if offset != len(blob):
        raise FormatError(f"trailing bytes after dataset payload at byte {offset}")
    return samples


def stack_samples(samples: list[SequenceSample]):
    """Stack into (N, T, H, W) arrays; every sample must share one shape."""
    if not samples:
        raise FormatError("dataset holds no samples")
    shape = samples[0].frames.shape
    for i, s in enumerate(samples):
        if s.frames.shape != shape:
            raise FormatError(f"sample {i} shape {s.frames.shape} differs from {shape}")
    frames = np.stack([s.frames for s in samples])
    gt = np.stack([s.gt for s in samples])
    return frames, gt
