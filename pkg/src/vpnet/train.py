"""RMSProp with a plateau learning-rate schedule, plus training and evaluation loops."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as D
from . import model as M
from . import tensor as T

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    def __init__(self, message, step=None, name=None):
        super().__init__(message)
        self.step = step
        self.name = name


class ConfigMismatch(ValueError):
    pass


@dataclass
class RMSPropState:
    learning_rate: float = 3e-4
    rho: float = 0.9
    eps: float = 1e-8
    step: int = 0
    accumulators: dict = field(default_factory=dict)
    # plateau bookkeeping: observation index where the next check window may start
    plateau_reset: int = 0
    reductions: int = 0


@dataclass(frozen=True)
class PlateauSchedule:
    window: int = 500
    min_rel_improvement: float = 1e-3
    factor: float = 0.3
    cooldown: int = 500

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError(f"decay factor must lie in (0, 1), got {self.factor}")
        if self.window < 1 or self.cooldown < 0:
            raise ValueError("window must be >= 1 and cooldown >= 0")


def rmsprop_step(params: dict, grads: dict | None, state: RMSPropState) -> None:
    """In-place update ``acc = rho*acc + (1-rho)*g^2; p -= lr*g/sqrt(acc+eps)``.

    ``grads`` defaults to each parameter's ``grad`` slot (missing means zero).
    A non-finite gradient aborts the whole step before anything changes.
    """
    if grads is None:
        grads = {n: p.grad for n, p in params.items()}
    gs = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}", state.step, name)
        gs[name] = g
    rho, lr = state.rho, state.learning_rate
    for name, p in params.items():
        g = gs[name]
        acc = state.accumulators.get(name)
        acc = (1.0 - rho) * g * g if acc is None else rho * acc + (1.0 - rho) * g * g
        state.accumulators[name] = acc
        p.data -= lr * g / np.sqrt(acc + state.eps)
    state.step += 1


def plateau_check(loss_history, schedule: PlateauSchedule, state: RMSPropState) -> float:
    """Scale the learning rate by ``schedule.factor`` when learning flatlines.

    A check looks at the last ``window`` observations and asks whether
    their best loss improves on the best loss seen before them by at least
    ``min_rel_improvement`` (relative). With no earlier observation, the
    window's first loss is the reference. After a reduction, no check runs
    until ``cooldown`` observations pass and a fresh window has filled.
    """
    losses = [float(v[1]) if isinstance(v, (tuple, list)) else float(v) for v in loss_history]
    n, W = len(losses), schedule.window
    if n - state.plateau_reset < W:
        return state.learning_rate
    recent = min(losses[n - W:])
    ref = min(losses[:n - W]) if n > W else losses[n - W]
    if ref - recent < schedule.min_rel_improvement * abs(ref):
        state.learning_rate *= schedule.factor
        state.reductions += 1
        state.plateau_reset = n + schedule.cooldown
        log.info("plateau at observation %d: lr -> %.3g", n, state.learning_rate)
    return state.learning_rate


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None)))
    if max_norm and total > max_norm:
        s = max_norm / total
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * s
    return total


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    batch_size: int = 4
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0
    clip_norm: float = 10.0
    schedule: PlateauSchedule = PlateauSchedule()
    zero_actions: bool = False

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainResult:
    config: M.ModelConfig
    params: M.Params
    metrics: list
    checkpoints: list


def _check_data_shape(config: M.ModelConfig, canvas: int, frames: int, channels: int) -> None:
    got, want = (frames, canvas, channels), (config.num_frames, config.frame_size,
                                             config.color_channels)
    if got != want:
        raise ConfigMismatch(f"data yields (frames, size, channels) {got}, model expects {want}")


def batch_source(model_config: M.ModelConfig, data_config, rng,
                 zero_actions: bool = False) -> Callable[[int], tuple]:
    """Return ``draw(batch) -> (videos, cond)`` generating fresh training sequences."""
    if isinstance(data_config, D.PushConfig):
        _check_data_shape(model_config, data_config.canvas, data_config.frames,
                          data_config.channels)

        def draw(batch):
            videos, states, actions = D.pushing_batch(data_config, rng, batch)
            if zero_actions:
                actions = np.zeros_like(actions)
            cond = D.conditioning(states, actions, model_config.context_frames)
            return videos, (cond if model_config.cond_dim else None)

        return draw
    if isinstance(data_config, D.MovingSpriteConfig):
        _check_data_shape(model_config, data_config.canvas, data_config.frames, 1)
        bank = D.default_bank(data_config.sprite_size)
        train_pool, _ = bank.split()
        return lambda batch: (D.moving_batch(bank, data_config, rng, batch, train_pool), None)
    raise TypeError(f"unsupported data config {type(data_config).__name__}")


def fit_params(config: M.ModelConfig, params: M.Params, draw: Callable[[int], tuple],
               train_config: TrainConfig, on_step: Callable[[dict, float], None] | None = None,
               on_checkpoint: Callable[[int], None] | None = None) -> list:
    named = params.named()
    state = RMSPropState(learning_rate=train_config.learning_rate)
    history, metrics = [], []
    for step in range(1, train_config.steps + 1):
        t0 = time.perf_counter()
        videos, cond = draw(train_config.batch_size)
        T.zero_grad(named)
        loss = M.sequence_loss(params, config, videos, cond)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite loss at step {step}", step)
        T.backward(loss)
        grads = {n: p.grad for n, p in named.items()}
        clip_global_norm(grads, train_config.clip_norm)
        try:
            rmsprop_step(named, grads, state)
        except NonFiniteError as e:
            e.step = step
            raise
        history.append((step, value))
        lr = plateau_check(history, train_config.schedule, state)
        rec = {"step": step, "loss_nats_per_frame": value, "lr": lr}
        wall_ms = round(1000.0 * (time.perf_counter() - t0), 3)
        metrics.append(rec)
        if on_step:
            on_step(rec, wall_ms)
        if on_checkpoint and train_config.checkpoint_every and step % train_config.checkpoint_every == 0:
            on_checkpoint(step)
    return metrics


def train_loop(model_config: M.ModelConfig, data_config, train_config: TrainConfig,
               out_dir=None) -> TrainResult:
    """Train from scratch on freshly generated sequences; fully determined by the seed.

    With ``out_dir``, writes ``metrics.jsonl`` (step, loss, lr per step),
    ``timing.jsonl`` (step, wall_ms), periodic ``ckpt_<step>.vpnk`` files
    and the final ``checkpoint.vpnk``. Everything except the timing log is
    bit-reproducible.
    """
    rng = np.random.default_rng(train_config.seed)
    params = M.init_params(model_config, train_config.seed)
    draw = batch_source(model_config, data_config, rng, train_config.zero_actions)
    checkpoints = []
    out = Path(out_dir) if out_dir is not None else None
    log_file = timing_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "metrics.jsonl", "w")
        timing_file = open(out / "timing.jsonl", "w")

    def on_step(rec, wall_ms):
        log.debug("step %d: %.4f nats/frame in %.1f ms", rec["step"],
                  rec["loss_nats_per_frame"], wall_ms)
        if log_file:
            log_file.write(json.dumps(rec) + "\n")
            log_file.flush()
            timing_file.write(json.dumps({"step": rec["step"], "wall_ms": wall_ms}) + "\n")

    def on_checkpoint(step):
        if out is not None:
            path = out / f"ckpt_{step:06d}.vpnk"
            M.save_checkpoint(path, model_config, params)
            checkpoints.append(str(path))

    try:
        metrics = fit_params(model_config, params, draw, train_config, on_step, on_checkpoint)
    finally:
        if log_file:
            log_file.close()
            timing_file.close()
    if out is not None:
        path = out / "checkpoint.vpnk"
        M.save_checkpoint(path, model_config, params)
        checkpoints.append(str(path))
    return TrainResult(model_config, params, metrics, checkpoints)


@dataclass
class EvalReport:
    nats_per_frame: float
    lower_bound: float
    frames: int

    @property
    def gap(self) -> float:
        return self.nats_per_frame - self.lower_bound

    def to_dict(self) -> dict:
        return {"nats_per_frame": self.nats_per_frame, "lower_bound": self.lower_bound,
                "gap": self.gap, "frames": self.frames}


def check_compatible(config: M.ModelConfig, dataset: D.Dataset) -> None:
    v = dataset.videos
    if v.ndim != 5:
        raise ConfigMismatch(f"dataset videos must be rank 5, got shape {v.shape}")
    N, C = config.frame_size, config.color_channels
    if v.shape[2:] != (N, N, C):
        raise ConfigMismatch(f"dataset frames {v.shape[2:]} != model frames {(N, N, C)}")
    if v.shape[1] != config.num_frames:
        raise ConfigMismatch(f"dataset has {v.shape[1]} frames per sequence, model expects "
                             f"{config.num_frames}")
    if bool(config.cond_dim) != dataset.has_cond:
        raise ConfigMismatch("conditioning mismatch between model and dataset")


def eval_loop(config: M.ModelConfig, params: M.Params, dataset: D.Dataset,
              batch_size: int = 16, cond_override=None) -> EvalReport:
    """Teacher-forced nats per predicted frame, with the dataset's H(z, z) floor.

    The floor is reported for the Bernoulli head; discrete NLL is bounded by 0.
    """
    check_compatible(config, dataset)
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    cond = dataset.cond(config.context_frames) if cond_override is None else cond_override
    total, frames = 0.0, 0
    with T.no_grad():
        for s in range(0, len(dataset), batch_size):
            c = None if cond is None else cond[s:s + batch_size]
            per = M.frame_nll(params, config, dataset.videos[s:s + batch_size], c).data
            total += float(per.sum())
            frames += per.size
    if config.head == "bernoulli":
        z = dataset.videos[:, config.context_frames:].astype(np.float64) / 255.0
        bound = M.lower_bound(z.reshape(-1, *z.shape[2:]))
    else:
        bound = 0.0
    return EvalReport(total / frames, bound, frames)


def read_metrics(path) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
