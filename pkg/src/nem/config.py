"""Experiment configuration: a flat, typed key-value text format.

A config file is plain text, one ``section.key = value`` pair per line.
Blank lines and lines starting with ``#`` are ignored.  Keys are fixed by
the schema below; unknown or duplicate keys are errors, as is a missing or
mismatched ``config_version``.  Values are typed (int, float, bool, str,
or a comma-separated int list) and every key has a default, so the empty
file is a valid config.  ``to_text`` writes the fully resolved form back
out in schema order, which is what training runs store next to their
outputs.

Schema (defaults in parentheses):

  config_version     format version, must equal 1          (1)
  seed               master seed for data/init/noise       (0)
  data.kind          static_shapes | flying_shapes | flying_mnist
  data.train         training set size                     (50000)
  data.val           validation set size                   (10000)
  data.test          test set size                         (10000)
  data.objects       sprites or digits per sequence        (3)
  data.timesteps     frames per sequence, 1 for static     (1)
  data.mnist_images  IDX image file for flying_mnist       ("")
  model.variant      nem | rnnem                           (rnnem)
  model.arch         fc | conv_shapes | conv_mnist         (fc)
  model.hidden       latent width of the fc networks       (250)
  model.k            mixture components                    (4)
  model.steps        EM steps on static data               (15)
  pixel.family       bernoulli | gaussian                  (bernoulli)
  pixel.sigma2       gaussian pixel variance               (0.25)
  pixel.prior        pixelwise prior parameter             (0.0)
  loss.placement     final_step | every_step               (final_step)
  loss.inter_weight  weight on the off-responsibility term (1.0)
  loss.next_step     predict the next frame instead        (false)
  loss.input_norm    standardize the per-step input        (false)
  noise.kind         none | bitflip | masked_uniform       (bitflip)
  noise.p            noise probability                     (0.1)
  optim.lr           Adam step size, first stage           (0.001)
  optim.lr_later     Adam step size from stage 2 on, 0 = same  (0.0)
  optim.batch        minibatch size                        (64)
  train.epochs       epoch cap per stage                   (50)
  train.patience     early-stop patience in epochs         (10)
  train.stages       digit-pool sizes per curriculum stage ("")
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .datasets import MNIST_FRAME_SIZE, FRAME_SIZE, NoiseSpec
from .mixture import PixelModel
from .core import UnrollConfig
from .tensor import ConfigError

CONFIG_VERSION = 1

DATA_KINDS = ("static_shapes", "flying_shapes", "flying_mnist")
ARCHS = ("fc", "conv_shapes", "conv_mnist")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data_kind: str = "static_shapes"
    data_train: int = 50000
    data_val: int = 10000
    data_test: int = 10000
    data_objects: int = 3
    data_timesteps: int = 1
    data_mnist_images: str = ""
    model_variant: str = "rnnem"
    model_arch: str = "fc"
    model_hidden: int = 250
    model_k: int = 4
    model_steps: int = 15
    pixel_family: str = "bernoulli"
    pixel_sigma2: float = 0.25
    pixel_prior: float = 0.0
    loss_placement: str = "final_step"
    loss_inter_weight: float = 1.0
    loss_next_step: bool = False
    loss_input_norm: bool = False
    noise_kind: str = "bitflip"
    noise_p: float = 0.1
    optim_lr: float = 0.001
    optim_lr_later: float = 0.0
    optim_batch: int = 64
    train_epochs: int = 50
    train_patience: int = 10
    train_stages: tuple = ()

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.data_kind not in DATA_KINDS:
            raise ConfigError(f"data.kind must be one of {DATA_KINDS}, got {self.data_kind!r}")
        if self.model_variant not in ("nem", "rnnem"):
            raise ConfigError(f"model.variant must be nem or rnnem, got {self.model_variant!r}")
        if self.model_arch not in ARCHS:
            raise ConfigError(f"model.arch must be one of {ARCHS}, got {self.model_arch!r}")
        if self.pixel_family not in ("bernoulli", "gaussian"):
            raise ConfigError(f"pixel.family must be bernoulli or gaussian, got {self.pixel_family!r}")
        if self.loss_placement not in ("final_step", "every_step"):
            raise ConfigError(f"loss.placement must be final_step or every_step, got {self.loss_placement!r}")
        if self.noise_kind not in ("none", "bitflip", "masked_uniform"):
            raise ConfigError(f"noise.kind must be none, bitflip or masked_uniform, got {self.noise_kind!r}")
        for name in ("data_train", "data_val", "data_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{_KEY_OF[name]} must be >= 1")
        for name in ("data_objects", "data_timesteps", "model_hidden", "model_k",
                     "model_steps", "optim_batch", "train_epochs", "train_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{_KEY_OF[name]} must be >= 1")
        if not 0.0 <= self.noise_p <= 1.0:
            raise ConfigError(f"noise.p must lie in [0, 1], got {self.noise_p}")
        if self.pixel_sigma2 <= 0:
            raise ConfigError(f"pixel.sigma2 must be positive, got {self.pixel_sigma2}")
        if self.optim_lr <= 0 or self.optim_lr_later < 0:
            raise ConfigError("optim.lr must be positive and optim.lr_later non-negative")

        if self.data_kind == "static_shapes" and self.data_timesteps != 1:
            raise ConfigError("static_shapes data has exactly one frame; set data.timesteps = 1")
        if self.loss_next_step and self.data_timesteps < 2:
            raise ConfigError("loss.next_step needs sequences (data.timesteps >= 2)")
        if self.model_variant == "nem":
            # The gradient-ascent inner loop is defined for a feedforward
            # generator on a single frame; anything else has no M-step.
            if self.model_arch != "fc":
                raise ConfigError("model.variant nem supports only model.arch fc")
            if self.data_timesteps != 1:
                raise ConfigError("model.variant nem supports static data only")
            if self.loss_next_step:
                raise ConfigError("model.variant nem cannot do next-step prediction")
        if self.model_arch == "conv_shapes" and self.frame_size() != FRAME_SIZE:
            raise ConfigError("model.arch conv_shapes expects 28x28 frames")
        if self.model_arch == "conv_mnist" and self.data_kind != "flying_mnist":
            raise ConfigError("model.arch conv_mnist expects flying_mnist data")
        if self.train_stages:
            if self.data_kind != "flying_mnist":
                raise ConfigError("train.stages is a flying_mnist curriculum; other kinds train in one stage")
            sizes = list(self.train_stages)
            if any(s < 1 for s in sizes) or sizes != sorted(sizes):
                raise ConfigError(f"train.stages must be ascending positive sizes, got {sizes}")

    # Derived views, used by the harness.

    def frame_size(self) -> int:
        return MNIST_FRAME_SIZE if self.data_kind == "flying_mnist" else FRAME_SIZE

    def pixel_dim(self) -> int:
        return self.frame_size() ** 2

    def pixel_model(self) -> PixelModel:
        return PixelModel(self.pixel_family, sigma2=self.pixel_sigma2, prior=self.pixel_prior)

    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(self.noise_kind, self.noise_p)

    def stage_count(self) -> int:
        return max(1, len(self.train_stages))

    def lr_for_stage(self, stage: int) -> float:
        if stage > 0 and self.optim_lr_later > 0:
            return self.optim_lr_later
        return self.optim_lr

    def unroll(self, k: int | None = None, steps: int | None = None) -> UnrollConfig:
        """The inner-loop settings, with optional test-time overrides."""
        return UnrollConfig(
            k=k if k is not None else self.model_k,
            steps=steps if steps is not None else self.model_steps,
            variant=self.model_variant,
            loss_placement=self.loss_placement,
            next_step_prediction=self.loss_next_step,
            inter_loss_weight=self.loss_inter_weight,
            input_normalization=self.loss_input_norm,
            noise=self.noise_spec(),
        )

    def replace(self, **fields) -> "ExperimentConfig":
        return dataclasses.replace(self, **fields)

    def to_text(self) -> str:
        lines = [f"config_version = {CONFIG_VERSION}"]
        for key, attr, kind in _SCHEMA:
            lines.append(f"{key} = {_format_value(getattr(self, attr), kind)}")
        return "\n".join(lines) + "\n"


# (file key, attribute, type tag); config_version is handled separately.
_SCHEMA = [
    ("seed", "seed", "int"),
    ("data.kind", "data_kind", "str"),
    ("data.train", "data_train", "int"),
    ("data.val", "data_val", "int"),
    ("data.test", "data_test", "int"),
    ("data.objects", "data_objects", "int"),
    ("data.timesteps", "data_timesteps", "int"),
    ("data.mnist_images", "data_mnist_images", "str"),
    ("model.variant", "model_variant", "str"),
    ("model.arch", "model_arch", "str"),
    ("model.hidden", "model_hidden", "int"),
    ("model.k", "model_k", "int"),
    ("model.steps", "model_steps", "int"),
    ("pixel.family", "pixel_family", "str"),
    ("pixel.sigma2", "pixel_sigma2", "float"),
    ("pixel.prior", "pixel_prior", "float"),
    ("loss.placement", "loss_placement", "str"),
    ("loss.inter_weight", "loss_inter_weight", "float"),
    ("loss.next_step", "loss_next_step", "bool"),
    ("loss.input_norm", "loss_input_norm", "bool"),
    ("noise.kind", "noise_kind", "str"),
    ("noise.p", "noise_p", "float"),
    ("optim.lr", "optim_lr", "float"),
    ("optim.lr_later", "optim_lr_later", "float"),
    ("optim.batch", "optim_batch", "int"),
    ("train.epochs", "train_epochs", "int"),
    ("train.patience", "train_patience", "int"),
    ("train.stages", "train_stages", "ints"),
]
_FIELD_OF = {key: (attr, kind) for key, attr, kind in _SCHEMA}
_KEY_OF = {attr: key for key, attr, _ in _SCHEMA}


def _format_value(value, kind: str) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "ints":
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(raw: str, kind: str, key: str, lineno: int):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(part) for part in raw.split(",") if part.strip())
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {kind}, got {raw!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse config text; unknown keys, duplicates and bad types all raise."""
    fields = {}
    seen = set()
    version = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key == "config_version":
            version = _parse_value(raw, "int", key, lineno)
            continue
        if key not in _FIELD_OF:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        attr, kind = _FIELD_OF[key]
        fields[attr] = _parse_value(raw, kind, key, lineno)
    if version is not None and version != CONFIG_VERSION:
        raise ConfigError(f"config_version {version} is not supported (this build reads {CONFIG_VERSION})")
    return ExperimentConfig(**fields)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
