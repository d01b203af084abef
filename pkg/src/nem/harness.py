"""Run orchestration: dataset generation, training, evaluation, rendering.

A run directory holds
  resolved.cfg      the fully resolved config the run actually used
  runlog.csv        metric rows: run_id, phase, epoch, step, metric, value
  events.log        timestamped progress lines (the only nondeterministic file)
  last.nemc         weights + optimizer state + counters, written every epoch
  best.nemc         weights of the lowest-validation-loss epoch so far
  stage_best.nemc   weights of the current stage's best epoch (curricula)
  diagnostic.nemc   written once if training aborts on non-finite numbers

Every random draw comes from a named stream keyed by the master seed, so a
run is a pure function of (config text, seed, dataset bytes, thread count).
Stream keys: data splits (seed, 0, split, stage), parameter init (seed, 1),
epoch shuffling (seed, 2, stage, epoch), per-batch training noise and carry
init (seed, 3, stage, epoch, batch), validation noise (seed, 4, batch) and
render noise (seed, 5, index). The validation stream deliberately ignores
the epoch so a later evaluation of a checkpoint can replay the exact
validation pass the training loop saw.

Logged metric values are rounded to float32 before writing or comparing,
which keeps resumed runs bit-identical with uninterrupted ones.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics, models
from .config import ExperimentConfig
from .core import UnrollConfig, unroll
from .datasets import (
    SequenceSample,
    apply_noise,
    gen_flying_mnist,
    gen_flying_shapes,
    gen_static_shapes,
    load_idx,
    read_dataset,
    stack_samples,
    write_dataset,
)
from .mixture import PixelModel
from .models import AdamState, NetworkSpec, ParameterStore, adam_step, init_parameters
from .tensor import ConfigError, Tape, Tensor

logger = logging.getLogger(__name__)

# Stream labels; see the module docstring.
_PHASE_DATA = 0
_PHASE_INIT = 1
_PHASE_SHUFFLE = 2
_PHASE_TRAIN = 3
_PHASE_VAL = 4
_PHASE_RENDER = 5

_SPLITS = ("train", "val", "test")

RUNLOG_COLUMNS = ("run_id", "phase", "epoch", "step", "metric", "value")

# Montage colors for responsibility maps, one per component (wraps past 10).
_PALETTE = np.array(
    [
        (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
        (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
        (210, 245, 60), (250, 190, 212),
    ],
    dtype=np.uint8,
)


def _stream(*key) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(k) for k in key])


def _stream_seed(*key) -> int:
    return int(_stream(*key).generate_state(1)[0])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def thread_count() -> int:
    """The pinned thread count, 0 when the library default is in effect."""
    raw = os.environ.get("NEM_THREADS", "").strip()
    return int(raw) if raw else 0


def build_network(cfg: ExperimentConfig) -> NetworkSpec:
    d = cfg.pixel_dim()
    if cfg.model_variant == "nem":
        return models.build_static_decoder(cfg.model_hidden, d)
    if cfg.model_arch == "fc":
        return models.build_static_rnn(d, cfg.model_hidden)
    return models.build_conv_encdec("shapes" if cfg.model_arch == "conv_shapes" else "mnist")


def init_params(cfg: ExperimentConfig, spec: NetworkSpec) -> ParameterStore:
    params = init_parameters(spec, _stream_seed(cfg.seed, _PHASE_INIT))
    if cfg.model_variant == "nem":
        # Learnable inner step size, updated by the same outer optimizer.
        params.add("eta", Tensor(np.asarray(0.1, dtype=np.float32)))
    return params


# ---------------------------------------------------------------------------
# Dataset generation


@dataclass(frozen=True)
class GeneratedFile:
    role: str
    path: Path
    count: int
    sha256: str


def _generate_split(cfg: ExperimentConfig, count: int, seed: int, digit_pool=None) -> list[SequenceSample]:
    if cfg.data_kind == "static_shapes":
        return gen_static_shapes(count, seed)
    if cfg.data_kind == "flying_shapes":
        return gen_flying_shapes(count, cfg.data_objects, cfg.data_timesteps, seed)
    return gen_flying_mnist(count, cfg.data_objects, cfg.data_timesteps, digit_pool, seed)


def run_generate(cfg: ExperimentConfig, out_dir) -> list[GeneratedFile]:
    """Write train/val/test NEMD files (per-stage train files for curricula)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    pool = None
    if cfg.data_kind == "flying_mnist":
        if not cfg.data_mnist_images:
            raise ConfigError("flying_mnist needs data.mnist_images (an IDX image file)")
        pool = load_idx(cfg.data_mnist_images)
        for size in cfg.train_stages:
            if size > len(pool):
                raise ConfigError(f"train.stages asks for {size} digits; pool holds {len(pool)}")

    written = []

    def emit(role: str, path: Path, count: int, seed: int, split_pool) -> None:
        samples = _generate_split(cfg, count, seed, split_pool)
        write_dataset(path, samples)
        written.append(GeneratedFile(role, path, len(samples), sha256_file(path)))

    if cfg.train_stages:
        for s, size in enumerate(cfg.train_stages):
            emit(
                f"train_stage{s}",
                out_dir / f"train_stage{s}.nemd",
                cfg.data_train,
                _stream_seed(cfg.seed, _PHASE_DATA, 0, s),
                pool[:size],
            )
    else:
        emit("train", out_dir / "train.nemd", cfg.data_train,
             _stream_seed(cfg.seed, _PHASE_DATA, 0, 0), pool)
    emit("val", out_dir / "val.nemd", cfg.data_val,
         _stream_seed(cfg.seed, _PHASE_DATA, 1, 0), pool)
    emit("test", out_dir / "test.nemd", cfg.data_test,
         _stream_seed(cfg.seed, _PHASE_DATA, 2, 0), pool)
    return written


def load_split(path):
    """Read a NEMD file into (frames (N,T,H,W) f32, gt (N,T,H,W) i16)."""
    return stack_samples(read_dataset(path))


def _check_frame_size(cfg: ExperimentConfig, frames: np.ndarray, path) -> None:
    size = cfg.frame_size()
    if frames.shape[-2:] != (size, size):
        raise ConfigError(
            f"{path} holds {frames.shape[-2]}x{frames.shape[-1]} frames; "
            f"this model expects {size}x{size}"
        )


# ---------------------------------------------------------------------------
# Logging


def _fmt_value(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(np.float32(value)))


class RunLog:
    """Append-only CSV of metric rows, deterministic by construction."""

    def __init__(self, path, run_id: str, resume: bool = False):
        self.path = Path(path)
        self.run_id = run_id
        if not (resume and self.path.exists()):
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(RUNLOG_COLUMNS)

    def row(self, phase: str, epoch: int, step: int, metric: str, value) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                (self.run_id, phase, epoch, step, metric, _fmt_value(value))
            )


class EventLog:
    """Wall-clock progress lines, kept apart from the deterministic CSV."""

    def __init__(self, path):
        self.path = Path(path)

    def line(self, text: str) -> None:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
        with open(self.path, "a") as fh:
            fh.write(f"{stamp} {text}\n")


def compute_run_id(cfg_text: str, data_hashes) -> str:
    h = hashlib.sha256()
    h.update(cfg_text.encode("utf-8"))
    for digest in data_hashes:
        h.update(bytes.fromhex(digest))
    return h.hexdigest()[:12]


# ---------------------------------------------------------------------------
# Checkpoint bundles (weights + optimizer + loop counters)


def _bundle_store(params: ParameterStore, adam: AdamState | None, meta: dict) -> ParameterStore:
    out = ParameterStore()
    for name, tensor in params.items():
        out.add(name, Tensor(tensor.data.copy()))
    if adam is not None:
        for name in params.names():
            out.add(f"opt.m.{name}", Tensor(adam.m[name].copy()))
            out.add(f"opt.v.{name}", Tensor(adam.v[name].copy()))
        out.add("opt.t", Tensor(np.asarray(float(adam.t), dtype=np.float32)))
    for key, value in meta.items():
        out.add(f"meta.{key}", Tensor(np.asarray(float(value), dtype=np.float32)))
    return out


def load_model_params(path) -> ParameterStore:
    """Model weights only, optimizer and counter entries stripped."""
    raw = models.load_checkpoint(path)
    params = ParameterStore()
    for name, tensor in raw.items():
        if not name.startswith(("opt.", "meta.")):
            params.add(name, tensor)
    return params


def _load_bundle(path):
    raw = models.load_checkpoint(path)
    params = ParameterStore()
    opt_m, opt_v, meta = {}, {}, {}
    opt_t = 0
    for name, tensor in raw.items():
        if name.startswith("opt.m."):
            opt_m[name[6:]] = tensor.data
        elif name.startswith("opt.v."):
            opt_v[name[6:]] = tensor.data
        elif name == "opt.t":
            opt_t = int(tensor.data)
        elif name.startswith("meta."):
            meta[name[5:]] = float(tensor.data)
        else:
            params.add(name, tensor)
    adam = AdamState(params)
    if opt_m:
        adam.m = {k: np.asarray(opt_m[k]) for k in params.names()}
        adam.v = {k: np.asarray(opt_v[k]) for k in params.names()}
        adam.t = opt_t
    return params, adam, meta


# ---------------------------------------------------------------------------
# Training


def _batch_bounds(n: int, batch: int):
    return [(lo, min(lo + batch, n)) for lo in range(0, n, batch)]


def _dataset_loss(
    frames: np.ndarray,
    cfg: ExperimentConfig,
    ucfg: UnrollConfig,
    spec: NetworkSpec,
    params: ParameterStore,
    model: PixelModel,
) -> float:
    """Mean per-sample loss under the fixed validation noise streams."""
    total = 0.0
    for b, (lo, hi) in enumerate(_batch_bounds(len(frames), cfg.optim_batch)):
        loss, _ = unroll(
            frames[lo:hi], ucfg, spec, params, model,
            seed=_stream(cfg.seed, _PHASE_VAL, b), record_trace=False,
        )
        total += float(loss.data) * (hi - lo)
    return total / len(frames)


@dataclass
class TrainResult:
    run_id: str
    best_val: float
    best_epoch: int
    epochs_run: int
    out_dir: Path
    best_path: Path
    last_path: Path


def _train_stage_paths(cfg: ExperimentConfig, data_dir: Path) -> list[Path]:
    if cfg.train_stages:
        return [data_dir / f"train_stage{s}.nemd" for s in range(len(cfg.train_stages))]
    return [data_dir / "train.nemd"]


def run_train(
    cfg: ExperimentConfig,
    data_dir,
    out_dir,
    resume_from=None,
    stop_after_epochs: int | None = None,
) -> TrainResult:
    """Train to early stopping (or the epoch cap) on each curriculum stage.

    `stop_after_epochs` pauses the run after that many additional epochs;
    a paused run continues bit-exactly via `resume_from=last.nemc`.
    """
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    stage_paths = _train_stage_paths(cfg, data_dir)
    val_path = data_dir / "val.nemd"
    for p in (*stage_paths, val_path):
        if not p.exists():
            raise ConfigError(f"missing dataset file {p}; run generate first")

    run_id = compute_run_id(cfg.to_text(), [sha256_file(p) for p in (*stage_paths, val_path)])
    (out_dir / "resolved.cfg").write_text(cfg.to_text())

    val_frames, _ = load_split(val_path)
    _check_frame_size(cfg, val_frames, val_path)

    spec = build_network(cfg)
    model = cfg.pixel_model()
    ucfg = cfg.unroll()

    resume = resume_from is not None
    if resume:
        params, adam, meta = _load_bundle(resume_from)
        stage = int(meta["stage"])
        stage_epoch = int(meta["stage_epoch"])
        epoch = int(meta["epoch"])
        global_step = int(meta["global_step"])
        best_val = float(meta["best_val"])
        best_epoch = int(meta["best_epoch"])
        stage_best_val = float(meta["stage_best_val"])
        bad_epochs = int(meta["bad_epochs"])
        stage_best_path = out_dir / "stage_best.nemc"
        stage_best = (
            load_model_params(stage_best_path).snapshot()
            if stage_best_path.exists()
            else params.snapshot()
        )
    else:
        params = init_params(cfg, spec)
        adam = AdamState(params)
        stage, stage_epoch, epoch, global_step = 0, 0, 0, 0
        best_val, best_epoch = math.inf, 0
        stage_best_val, bad_epochs = math.inf, 0
        stage_best = params.snapshot()

    log = RunLog(out_dir / "runlog.csv", run_id, resume=resume)
    events = EventLog(out_dir / "events.log")
    if not resume:
        log.row("meta", 0, 0, "seed", cfg.seed)
        log.row("meta", 0, 0, "threads", thread_count())
        log.row("meta", 0, 0, "stages", cfg.stage_count())
    events.line(f"run {run_id} {'resumed' if resume else 'started'}: "
                f"{cfg.model_variant}/{cfg.model_arch} on {cfg.data_kind}")

    def save_state(path: Path) -> None:
        meta = {
            "stage": stage, "stage_epoch": stage_epoch, "epoch": epoch,
            "global_step": global_step, "best_val": best_val,
            "best_epoch": best_epoch, "stage_best_val": stage_best_val,
            "bad_epochs": bad_epochs,
        }
        models.save_checkpoint(path, _bundle_store(params, adam, meta))

    def save_weights(path: Path, arrays: dict) -> None:
        store = ParameterStore()
        for name in params.names():
            store.add(name, Tensor(arrays[name].copy()))
        models.save_checkpoint(path, _bundle_store(store, None, {}))

    epochs_this_call = 0
    while stage < cfg.stage_count():
        train_frames, _ = load_split(stage_paths[stage])
        _check_frame_size(cfg, train_frames, stage_paths[stage])
        if train_frames.shape[1] != cfg.data_timesteps:
            raise ConfigError(
                f"{stage_paths[stage]} holds T={train_frames.shape[1]} sequences; "
                f"config expects data.timesteps={cfg.data_timesteps}"
            )
        n = len(train_frames)
        lr = cfg.lr_for_stage(stage)
        if stage_epoch == 0 and not resume:
            log.row("meta", epoch, global_step, "stage_start", stage)
            events.line(f"stage {stage}: {n} samples, lr {lr}")
        resume = False

        while stage_epoch < cfg.train_epochs and bad_epochs < cfg.train_patience:
            if stop_after_epochs is not None and epochs_this_call >= stop_after_epochs:
                save_state(out_dir / "last.nemc")
                events.line(f"paused after epoch {epoch}")
                return TrainResult(run_id, best_val, best_epoch, epochs_this_call,
                                   out_dir, out_dir / "best.nemc", out_dir / "last.nemc")
            stage_epoch += 1
            epoch += 1
            started = time.monotonic()
            order = np.random.default_rng(
                _stream(cfg.seed, _PHASE_SHUFFLE, stage, stage_epoch)
            ).permutation(n)
            running = 0.0
            try:
                for b, (lo, hi) in enumerate(_batch_bounds(n, cfg.optim_batch)):
                    batch = train_frames[order[lo:hi]]
                    with Tape() as tape:
                        loss, _ = unroll(
                            batch, ucfg, spec, params, model,
                            seed=_stream(cfg.seed, _PHASE_TRAIN, stage, stage_epoch, b),
                            record_trace=False,
                        )
                        grads = tape.backward(loss)
                    if not np.isfinite(loss.data):
                        raise RuntimeError(f"non-finite loss in epoch {epoch} batch {b}")
                    adam_step(params, grads, adam, lr=lr)
                    global_step += 1
                    running += float(loss.data) * (hi - lo)
            except RuntimeError as err:
                save_state(out_dir / "diagnostic.nemc")
                events.line(f"aborted: {err}")
                raise RuntimeError(f"training aborted ({err}); wrote diagnostic.nemc") from err

            train_loss = float(np.float32(running / n))
            val_loss = float(np.float32(_dataset_loss(val_frames, cfg, ucfg, spec, params, model)))
            if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
                save_state(out_dir / "diagnostic.nemc")
                events.line(f"aborted: non-finite loss in epoch {epoch}")
                raise RuntimeError(
                    f"training aborted (non-finite loss in epoch {epoch}); wrote diagnostic.nemc"
                )
            log.row("train", epoch, global_step, "loss", train_loss)
            log.row("val", epoch, global_step, "loss", val_loss)
            events.line(
                f"epoch {epoch} (stage {stage}): train {train_loss:.6f} "
                f"val {val_loss:.6f} [{time.monotonic() - started:.1f}s]"
            )
            logger.info("epoch %d: train %.6f val %.6f", epoch, train_loss, val_loss)

            if val_loss < stage_best_val:
                stage_best_val = val_loss
                stage_best = params.snapshot()
                save_weights(out_dir / "stage_best.nemc", stage_best)
                bad_epochs = 0
            else:
                bad_epochs += 1
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                save_weights(out_dir / "best.nemc", params.snapshot())
            save_state(out_dir / "last.nemc")
            epochs_this_call += 1

        # Next stage warm-starts from this stage's best weights.
        params.restore(stage_best)
        stage += 1
        stage_epoch = 0
        bad_epochs = 0
        stage_best_val = math.inf
        adam = AdamState(params)
        save_state(out_dir / "last.nemc")

    events.line(f"finished: best val {best_val:.6f} at epoch {best_epoch}")
    return TrainResult(run_id, best_val, best_epoch, epochs_this_call,
                       out_dir, out_dir / "best.nemc", out_dir / "last.nemc")


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalResult:
    eval_id: str
    loss: float
    ami_mean: float
    ami_std: float
    ami_count: int
    ami_skipped: int
    steps: int
    curve: list  # (step, mean, q25, q75)
    component_mass: np.ndarray
    bce_upper: float | None
    bce_mixture: float | None


def _target_index(step: int, t: int, next_step: bool) -> int:
    if t == 1:
        return 0
    if next_step:
        return min(step + 1, t - 1)
    return step


def _safe_ami(pred: np.ndarray, gt: np.ndarray) -> float:
    try:
        return metrics.ami(pred, gt)
    except metrics.MetricError:
        return math.nan


def run_eval(
    cfg: ExperimentConfig,
    checkpoint_path,
    data_path,
    out_path=None,
    k: int | None = None,
    steps: int | None = None,
) -> EvalResult:
    """Score a checkpoint on a dataset, optionally overriding K and steps.

    K only changes how many copies of the network run, never the weights.
    On static data `steps` sets the number of EM iterations; on sequences
    it truncates to the first `steps` frames (longer evals need a longer
    generated dataset). Inputs are verified unmodified afterwards.
    """
    checkpoint_path, data_path = Path(checkpoint_path), Path(data_path)
    hashes_before = (sha256_file(checkpoint_path), sha256_file(data_path))

    params = load_model_params(checkpoint_path)
    spec = build_network(cfg)
    model = cfg.pixel_model()

    frames, gts = load_split(data_path)
    _check_frame_size(cfg, frames, data_path)
    t = frames.shape[1]
    if t > 1 and steps is not None:
        if steps > t:
            raise ConfigError(
                f"eval steps={steps} exceeds the dataset's T={t}; "
                f"generate longer sequences to unroll further"
            )
        frames, gts, t = frames[:, :steps], gts[:, :steps], steps
    ucfg = cfg.unroll(k=k, steps=steps if t == 1 else None)

    n = len(frames)
    d = cfg.pixel_dim()
    gt_flat = gts.reshape(n, t, d)
    sequential = t > 1
    bernoulli = model.family == "bernoulli"

    loss_total = 0.0
    sample_scores: list[float] = []
    step_scores: list[np.ndarray] = []
    mass = None
    bce_u_total, bce_m_total, bce_weight = 0.0, 0.0, 0

    for b, (lo, hi) in enumerate(_batch_bounds(n, cfg.optim_batch)):
        loss, traces = unroll(
            frames[lo:hi], ucfg, spec, params, model,
            seed=_stream(cfg.seed, _PHASE_VAL, b), record_trace=True,
        )
        loss_total += float(loss.data) * (hi - lo)
        n_steps = len(traces)
        if mass is None:
            mass = np.zeros(ucfg.k, dtype=np.float64)

        targets = [_target_index(s, t, cfg.loss_next_step) for s in range(n_steps)]
        batch_gt = gt_flat[lo:hi]
        for i in range(hi - lo):
            per_step = np.array([
                _safe_ami(metrics.labels_from_gamma(traces[s].gamma[i]), batch_gt[i, targets[s]])
                for s in range(n_steps)
            ])
            step_scores.append(per_step)
            if sequential:
                pred_all = np.concatenate(
                    [metrics.labels_from_gamma(traces[s].gamma[i]) for s in range(n_steps)]
                )
                gt_all = np.concatenate([batch_gt[i, targets[s]] for s in range(n_steps)])
                sample_scores.append(_safe_ami(pred_all, gt_all))
            else:
                sample_scores.append(per_step[-1])

        for s, trace in enumerate(traces):
            mass += trace.gamma.sum(axis=(0, 1))
            if bernoulli:
                x_next = frames[lo:hi].reshape(hi - lo, t, d)[:, targets[s]]
                bce_u_total += metrics.bce_upper_bound(trace.psi, trace.gamma, x_next) * (hi - lo)
                bce_m_total += metrics.bce_mixture(trace.psi, trace.gamma, x_next) * (hi - lo)
                bce_weight += hi - lo

    hashes_after = (sha256_file(checkpoint_path), sha256_file(data_path))
    if hashes_before != hashes_after:
        raise RuntimeError("evaluation must not modify the checkpoint or dataset")

    scores = np.asarray(sample_scores, dtype=np.float64)
    valid = scores[np.isfinite(scores)]
    if len(valid) == 0:
        raise metrics.MetricError("no sample produced a defined grouping score")
    curve_matrix = np.vstack(step_scores)
    n_steps = curve_matrix.shape[1]
    curve = []
    for s in range(n_steps):
        col = curve_matrix[:, s]
        col = col[np.isfinite(col)]
        curve.append((
            s,
            float(col.mean()) if len(col) else math.nan,
            float(np.percentile(col, 25)) if len(col) else math.nan,
            float(np.percentile(col, 75)) if len(col) else math.nan,
        ))

    result = EvalResult(
        eval_id=compute_run_id(
            cfg.to_text() + f"k={k} steps={steps}", list(hashes_before)
        ),
        loss=float(np.float32(loss_total / n)),
        ami_mean=float(valid.mean()),
        ami_std=float(valid.std()),
        ami_count=int(len(valid)),
        ami_skipped=int(len(scores) - len(valid)),
        steps=n_steps,
        curve=curve,
        component_mass=mass / mass.sum(),
        bce_upper=(bce_u_total / bce_weight) if bce_weight else None,
        bce_mixture=(bce_m_total / bce_weight) if bce_weight else None,
    )
    if out_path is not None:
        _write_eval_csv(result, out_path)
    return result


def _write_eval_csv(result: EvalResult, out_path) -> None:
    log = RunLog(out_path, result.eval_id)
    # Aggregates use step=-1; curve rows use the step index; component
    # mass rows borrow the step column for the component index.
    log.row("test", 0, -1, "loss", result.loss)
    log.row("test", 0, -1, "ami_mean", result.ami_mean)
    log.row("test", 0, -1, "ami_std", result.ami_std)
    log.row("test", 0, -1, "ami_count", result.ami_count)
    log.row("test", 0, -1, "ami_skipped", result.ami_skipped)
    if result.bce_upper is not None:
        log.row("test", 0, -1, "bce_upper", result.bce_upper)
        log.row("test", 0, -1, "bce_mixture", result.bce_mixture)
    for idx, share in enumerate(result.component_mass):
        log.row("test", 0, idx, "component_mass", float(share))
    for s, mean, q25, q75 in result.curve:
        log.row("test", 0, s, "ami_step_mean", mean)
        log.row("test", 0, s, "ami_step_q25", q25)
        log.row("test", 0, s, "ami_step_q75", q75)


# ---------------------------------------------------------------------------
# Rendering


def _to_u8(gray: np.ndarray) -> np.ndarray:
    return np.round(np.clip(gray, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pnm(path, image: np.ndarray) -> None:
    """Write a binary PGM (2-D u8 array) or PPM (3-D, trailing RGB axis)."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim == 2:
        magic = b"P5"
        h, w = image.shape
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
        h, w = image.shape[:2]
    else:
        raise ConfigError(f"expected (H, W) or (H, W, 3) pixels, got {image.shape}")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(image.tobytes())


def run_render(
    cfg: ExperimentConfig,
    checkpoint_path,
    data_path,
    out_path,
    index: int = 0,
    fmt: str | None = None,
    k: int | None = None,
    steps: int | None = None,
):
    """Montage of one sample: the noisy input row, one predicted-image row
    per component, and a hard-assignment row; one column per step."""
    out_path = Path(out_path)
    if fmt is None:
        fmt = "pgm" if out_path.suffix.lower() == ".pgm" else "ppm"
    if fmt not in ("pgm", "ppm"):
        raise ConfigError(f"format must be pgm or ppm, got {fmt!r}")

    params = load_model_params(checkpoint_path)
    spec = build_network(cfg)
    model = cfg.pixel_model()
    frames, _ = load_split(data_path)
    _check_frame_size(cfg, frames, data_path)
    if not 0 <= index < len(frames):
        raise ConfigError(f"sample index {index} outside dataset of {len(frames)}")

    sample = frames[index : index + 1]
    t = sample.shape[1]
    if t > 1 and steps is not None:
        if steps > t:
            raise ConfigError(f"render steps={steps} exceeds the dataset's T={t}")
        sample, t = sample[:, :steps], steps
    ucfg = cfg.unroll(k=k, steps=steps if t == 1 else None)

    # Replays the unroll's noise draws: same stream, same draw order.
    seed_key = (cfg.seed, _PHASE_RENDER, index)
    noise_rng = np.random.default_rng(_stream(*seed_key))
    size = cfg.frame_size()
    noisy = [apply_noise(sample[:, ft], ucfg.noise, noise_rng)[0] for ft in range(t)]

    _, traces = unroll(sample, ucfg, spec, params, model, seed=_stream(*seed_key))
    n_steps = len(traces)
    kk = ucfg.k

    tiles = np.zeros((kk + 2, n_steps, size, size), dtype=np.float64)
    assign = np.zeros((n_steps, size, size), dtype=np.int64)
    for s, trace in enumerate(traces):
        tiles[0, s] = noisy[s if t > 1 else 0]
        for comp in range(kk):
            tiles[1 + comp, s] = trace.psi[0, comp].reshape(size, size)
        assign[s] = metrics.labels_from_gamma(trace.gamma[0]).reshape(size, size)

    gray = _to_u8(tiles.transpose(0, 2, 1, 3).reshape((kk + 2) * size, n_steps * size))
    assign_strip = assign.transpose(1, 0, 2).reshape(size, n_steps * size)
    if fmt == "pgm":
        # Hard assignments become K evenly spaced gray levels.
        levels = ((assign_strip + 1) * 255) // kk
        gray[(kk + 1) * size :, :] = levels.astype(np.uint8)
        write_pnm(out_path, gray)
    else:
        rgb = np.repeat(gray[:, :, None], 3, axis=2)
        colors = _PALETTE[assign_strip % len(_PALETTE)]
        rgb[(kk + 1) * size :, :, :] = colors
        write_pnm(out_path, rgb)
    return out_path
