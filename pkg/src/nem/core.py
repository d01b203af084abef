"""Unrolled EM procedures and the outer training objective.

Two variants share one loop. The gradient-ascent variant keeps a latent
matrix theta per component and improves the expected complete-data log
likelihood Q by an explicit gradient step through the decoder. The
recurrent variant replaces that update with a learned cell acting on the
responsibility-weighted prediction error.

Component copies share weights, so a batch of B samples with K components
runs as one (B*K)-row batch everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mixture, models, tensor as T
from .datasets import NoiseSpec, apply_noise
from .mixture import PixelModel
from .models import NetworkSpec, ParameterStore
from .tensor import ConfigError, Tensor

VARIANTS = ("nem", "rnnem")
PLACEMENTS = ("final_step", "every_step")


@dataclass(frozen=True)
class UnrollConfig:
    k: int
    steps: int
    variant: str = "rnnem"
    loss_placement: str = "final_step"
    next_step_prediction: bool = False
    inter_loss_weight: float = 1.0
    input_normalization: bool = False
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    # The E-step is treated as a constant during backpropagation, per the
    # training procedure. Disable only to make the whole unroll a smooth
    # function of the weights (finite-difference verification).
    stop_gamma_grad: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"need k >= 1, got {self.k}")
        if self.steps < 1:
            raise ConfigError(f"need steps >= 1, got {self.steps}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}'")
        if self.loss_placement not in PLACEMENTS:
            raise ConfigError(f"unknown loss placement '{self.loss_placement}'")
        if self.variant == "nem" and self.next_step_prediction:
            raise ConfigError("next-step prediction requires the recurrent variant")


@dataclass
class StepTrace:
    """Per-step diagnostics, detached from the graph."""

    psi: np.ndarray  # (B, K, D) float32
    gamma: np.ndarray  # (B, D, K) float32
    intra_loss: float
    inter_loss: float


@dataclass
class EmState:
    carry: Tensor  # theta (B*K, M) for nem; hidden (B*K, H) for rnnem
    psi: Tensor  # (B, K, D)
    gamma: Tensor  # (B, D, K)


def _maybe_stop(x: Tensor, stop: bool) -> Tensor:
    return T.stop_gradient(x) if stop else x


def init_state(
    cfg: UnrollConfig,
    spec: NetworkSpec,
    params: ParameterStore,
    model: PixelModel,
    x_noisy: Tensor,
    pi: Tensor,
    rng: np.random.Generator,
    init_carry: np.ndarray | None = None,
) -> EmState:
    """Draw the latent state, decode it, and take a first E-step.

    x_noisy is the corrupted first frame, (B, D). The carry is sampled
    i.i.d. Normal(0, 0.1^2) unless an explicit array is injected.
    """
    dtype = x_noisy.dtype
    b = x_noisy.shape[0]
    width = spec.hidden_size
    if init_carry is None:
        init_carry = (rng.standard_normal((b * cfg.k, width)) * 0.1).astype(dtype)
    else:
        init_carry = np.asarray(init_carry, dtype=dtype).reshape(b * cfg.k, width)
    carry = Tensor(init_carry)

    if cfg.variant == "nem":
        psi_flat = models.decode(spec, params, carry)
    else:
        psi_flat = models.decode(spec, params, models.cell_output(spec, params, carry))
    d = psi_flat.shape[-1]
    psi = T.reshape(psi_flat, (b, cfg.k, d))
    gamma = mixture.e_step(x_noisy, _maybe_stop(psi, cfg.stop_gamma_grad), pi, model)
    return EmState(carry=carry, psi=psi, gamma=gamma)


def input_transform(gamma: Tensor, psi_prev: Tensor, x_noisy: Tensor, normalize: bool = False) -> Tensor:
    """Responsibility-weighted prediction error, flattened to (B*K, D).

    Optionally standardizes each component's vector to zero mean and unit
    std; the epsilon inside the sqrt guards constant vectors.
    """
    b, k, d = psi_prev.shape
    gamma_kd = T.swap_last_two(gamma)
    x_row = T.reshape(x_noisy, (b, 1, d))
    inp = T.mul(gamma_kd, T.sub(psi_prev, x_row))
    if normalize:
        mu = T.reduce_mean(inp, axis=-1, keepdims=True)
        centered = T.sub(inp, mu)
        var = T.reduce_mean(T.mul(centered, centered), axis=-1, keepdims=True)
        inp = T.div(centered, T.sqrt(T.add(var, 1e-6)))
    return T.reshape(inp, (b * k, d))


def _upstream_at_head(x_row: Tensor, psi: Tensor, gamma_kd: Tensor, head: str, model: PixelModel) -> Tensor:
    """dQ/d(pre-activation of the decoder head), shape (B, K, D).

    The head activation's derivative is folded in analytically: for the
    Bernoulli/sigmoid pairing the psi*(1-psi) factors cancel, leaving
    gamma*(x - psi).
    """
    diff = T.sub(x_row, psi)
    if model.family == "bernoulli":
        if head != "sigmoid":
            raise ConfigError("bernoulli gradient M-step needs a sigmoid decoder head")
        return T.mul(gamma_kd, diff)
    u = T.mul(gamma_kd, T.mul(diff, 1.0 / model.sigma2))
    if head == "linear":
        return u
    if head == "sigmoid":
        return T.mul(u, T.mul(psi, T.sub(1.0, psi)))
    raise ConfigError(f"unsupported decoder head '{head}' for the gradient M-step")


def nem_m_step(
    theta: Tensor,
    x: Tensor,
    gamma: Tensor,
    spec: NetworkSpec,
    params: ParameterStore,
    eta,
    model: PixelModel,
) -> Tensor:
    """One generalized-EM M-step: theta + eta * dQ/dtheta.

    Q is the gamma-weighted complete-data log likelihood; gamma is held
    constant. The gradient is written out layer by layer (dense stacks
    only) so the update itself stays differentiable with respect to the
    decoder weights and eta.
    """
    layers = spec.layers
    if spec.recurrent_index is not None:
        raise ConfigError("gradient M-step expects a feed-forward decoder")
    for layer in layers:
        if isinstance(layer, models.Dense) and layer.layer_norm:
            raise ConfigError("gradient M-step does not support layer norm in the decoder")
        if not isinstance(layer, (models.Dense, models.Squash)):
            raise ConfigError(f"gradient M-step cannot handle {type(layer).__name__} layers")
    if not isinstance(layers[-1], models.Dense):
        raise ConfigError("decoder must end in a dense layer")

    b, d, k = gamma.shape
    outs = []
    h = theta
    for i, layer in enumerate(layers):
        h = models.apply_layer(layer, i, params, h)
        outs.append(h)
    psi = T.reshape(outs[-1], (b, k, d))

    gamma_kd = T.swap_last_two(_maybe_stop(gamma, True))
    x_row = T.reshape(x, (b, 1, d))
    u = _upstream_at_head(x_row, psi, gamma_kd, layers[-1].activation, model)
    u = T.reshape(u, (b * k, d))

    u = T.matmul(u, T.transpose(params[f"layer{len(layers) - 1}.w"], (1, 0)))
    for i in range(len(layers) - 2, -1, -1):
        layer = layers[i]
        deriv = T.activation_output_derivative(outs[i], layer.activation)
        if deriv is not None:
            u = T.mul(u, deriv)
        if isinstance(layer, models.Dense):
            u = T.matmul(u, T.transpose(params[f"layer{i}.w"], (1, 0)))
    return T.add(theta, T.mul(T.as_tensor(eta, like=theta), u))


def rnn_em_step(
    hidden: Tensor,
    x_target: Tensor,
    x_noisy: Tensor,
    psi_prev: Tensor,
    gamma_prev: Tensor,
    spec: NetworkSpec,
    params: ParameterStore,
    model: PixelModel,
    pi: Tensor,
    cfg: UnrollConfig,
):
    """One recurrent EM step. Returns (hidden', psi', gamma')."""
    b, k, d = psi_prev.shape
    inp = input_transform(gamma_prev, psi_prev, x_noisy, cfg.input_normalization)
    enc = models.encode(spec, params, inp)
    hidden, out = models.cell_step(spec, params, enc, hidden)
    psi = T.reshape(models.decode(spec, params, out), (b, k, d))
    gamma = mixture.e_step(x_target, _maybe_stop(psi, cfg.stop_gamma_grad), pi, model)
    return hidden, psi, gamma


def _loss_terms(x_target: Tensor, psi: Tensor, gamma: Tensor, pi: Tensor, model: PixelModel):
    """Per-batch-mean intra and inter loss terms (both to be minimized)."""
    gamma_kd = T.swap_last_two(gamma)
    log_joint = T.add(
        mixture.pixel_log_likelihood(x_target, psi, model),
        T.reshape(T.log(pi), (pi.shape[0], 1)),
    )
    intra = T.neg(T.reduce_mean(T.reduce_sum(T.mul(gamma_kd, log_joint), axis=(-2, -1))))
    kl = mixture.kl_to_prior(psi, model)
    inter = T.reduce_mean(T.reduce_sum(T.mul(T.sub(1.0, gamma_kd), kl), axis=(-2, -1)))
    return intra, inter


def outer_loss(
    x_target: Tensor,
    psi: Tensor,
    gamma: Tensor,
    pi: Tensor,
    model: PixelModel,
    inter_weight: float = 1.0,
    stop_gamma: bool = True,
) -> Tensor:
    """Training objective: responsibility-weighted NLL plus the weighted
    divergence of unassigned predictions from the pixel prior."""
    gamma = _maybe_stop(gamma, stop_gamma)
    intra, inter = _loss_terms(x_target, psi, gamma, pi, model)
    return T.add(intra, T.mul(inter_weight, inter))


def unroll(
    frames: np.ndarray,
    cfg: UnrollConfig,
    spec: NetworkSpec,
    params: ParameterStore,
    model: PixelModel,
    seed,
    eta=None,
    record_trace: bool = True,
    init_carry: np.ndarray | None = None,
):
    """Run the full inner loop over one batch.

    frames: (B, T, H, W) or (B, T, D) clean data. Noise is drawn from
    `seed` one frame at a time, in frame order. Returns (loss, traces).

    Static data (T=1) runs cfg.steps EM iterations against the one frame;
    sequential data runs one step per frame. With next-step prediction
    the last step falls back to the final frame as its own target.
    """
    frames = np.asarray(frames)
    if frames.ndim == 4:
        b, t = frames.shape[:2]
        frames = frames.reshape(b, t, -1)
    elif frames.ndim == 3:
        b, t = frames.shape[:2]
    else:
        raise ConfigError(f"frames must be (B, T, H, W) or (B, T, D), got {frames.shape}")
    dtype = next(iter(params.items()))[1].dtype if len(params) else np.float32
    frames = frames.astype(dtype, copy=False)
    d = frames.shape[-1]

    if cfg.variant == "nem":
        if eta is None:
            if "eta" not in params:
                raise ConfigError("gradient variant needs an eta parameter or argument")
            eta = params["eta"]
        if t != 1:
            raise ConfigError("gradient variant supports static (T=1) data only")

    rng = np.random.default_rng(seed)
    pi = mixture.uniform_mixing(cfg.k, dtype)
    sequential = t > 1

    noisy = [Tensor(apply_noise(frames[:, ft], cfg.noise, rng)) for ft in range(t)]
    clean = [Tensor(frames[:, ft]) for ft in range(t)]

    state = init_state(cfg, spec, params, model, noisy[0], pi, rng, init_carry=init_carry)
    carry, psi, gamma = state.carry, state.psi, state.gamma

    def target_at(step: int) -> Tensor:
        if not sequential:
            return clean[0]
        if cfg.next_step_prediction:
            return clean[min(step + 1, t - 1)]
        return clean[step]

    n_steps = cfg.steps if not sequential else t
    losses = []
    traces = []
    for step in range(n_steps):
        if cfg.variant == "nem":
            # Corruption only drives the inner update signal; posteriors
            # are taken against the clean target, mirroring the recurrent
            # variant where noise enters through the cell input alone.
            carry = nem_m_step(carry, noisy[0], gamma, spec, params, eta, model)
            psi = T.reshape(models.decode(spec, params, carry), (b, cfg.k, d))
            gamma = mixture.e_step(target_at(step), _maybe_stop(psi, cfg.stop_gamma_grad), pi, model)
        else:
            x_in = noisy[step] if sequential else noisy[0]
            carry, psi, gamma = rnn_em_step(
                carry, target_at(step), x_in, psi, gamma, spec, params, model, pi, cfg
            )
        if not np.all(np.isfinite(psi.data)):
            raise RuntimeError(f"non-finite predictions at step {step}")

        need_loss = cfg.loss_placement == "every_step" or step == n_steps - 1
        if need_loss:
            intra, inter = _loss_terms(
                target_at(step), psi, _maybe_stop(gamma, cfg.stop_gamma_grad), pi, model
            )
            losses.append(T.add(intra, T.mul(cfg.inter_loss_weight, inter)))
            if record_trace:
                traces.append(
                    StepTrace(
                        psi=np.array(psi.data, dtype=np.float32),
                        gamma=np.array(gamma.data, dtype=np.float32),
                        intra_loss=float(intra.data),
                        inter_loss=float(inter.data),
                    )
                )
        elif record_trace:
            intra, inter = _loss_terms(
                target_at(step),
                T.stop_gradient(psi),
                T.stop_gradient(gamma),
                pi,
                model,
            )
            traces.append(
                StepTrace(
                    psi=np.array(psi.data, dtype=np.float32),
                    gamma=np.array(gamma.data, dtype=np.float32),
                    intra_loss=float(intra.data),
                    inter_loss=float(inter.data),
                )
            )

    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    return total, traces
