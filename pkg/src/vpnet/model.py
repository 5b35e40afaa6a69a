"""The masked video model and its frame-independent baseline.

Both share the encoder and ConvLSTM context; they differ in the decoder.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .blocks import (
    ConvLSTMParams,
    ConvLSTMState,
    ReluBlockParams,
    RMBParams,
    block_forward,
    build_mask,
    cached_mask,
    conv_lstm_step,
    dilation_schedule,
    init_conv,
    named_tensors,
    zeros_param,
)
from .tensor import Tensor

LOG_FLOOR = 1e-12
NUM_LEVELS = 256
COND_SIZE = 5
HEADS = ("softmax256", "bernoulli")
KINDS = ("vpn", "baseline")
BLOCK_KINDS = ("rmb", "relu")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "vpn"
    frame_size: int = 16
    color_channels: int = 1
    encoder_blocks: int = 2
    decoder_blocks: int = 3
    block_width: int = 32
    lstm_channels: int = 32
    top_channels: int = 64
    head: str = "bernoulli"
    dilation: bool = True
    dilation_scheme: tuple = (1, 2, 4, 8)
    block_kind: str = "rmb"
    cond_dim: int = 0
    context_frames: int = 4
    num_frames: int = 6
    first_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "dilation_scheme", tuple(int(d) for d in self.dilation_scheme))
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.color_channels not in (1, 3):
            raise ValueError(f"color_channels must be 1 or 3, got {self.color_channels}")
        if self.head == "bernoulli" and self.color_channels != 1:
            raise ValueError("the bernoulli head models single-channel frames only")
        if self.block_width < 2 or self.block_width % 2:
            raise ValueError(f"block_width must be a positive even number, got {self.block_width}")
        if self.color_channels == 3:
            if self.block_width // 2 < 3 or self.top_channels < 3:
                raise ValueError("with 3 colors, block_width/2 and top_channels must be at least 3")
        if min(self.encoder_blocks, self.decoder_blocks) < 1:
            raise ValueError("need at least one encoder and one decoder block")
        if min(self.lstm_channels, self.top_channels, self.frame_size) < 1:
            raise ValueError("channel counts and frame size must be positive")
        if self.cond_dim not in (0, COND_SIZE, 2 * COND_SIZE):
            raise ValueError(f"cond_dim must be 0, {COND_SIZE} or {2 * COND_SIZE}, got {self.cond_dim}")
        if not 1 <= self.context_frames < self.num_frames:
            raise ValueError(f"need 1 <= context_frames < num_frames, got "
                             f"{self.context_frames} and {self.num_frames}")
        if self.first_kernel % 2 == 0:
            raise ValueError(f"first_kernel must be odd, got {self.first_kernel}")
        if not self.dilation_scheme:
            raise ValueError("dilation_scheme is empty")

    @property
    def predicted_frames(self) -> int:
        return self.num_frames - self.context_frames

    @property
    def color_groups(self) -> int:
        return self.color_channels

    @property
    def output_channels(self) -> int:
        return NUM_LEVELS * self.color_channels if self.head == "softmax256" else 1

    def encoder_dilations(self) -> list[int]:
        scheme = self.dilation_scheme if self.dilation else (1,)
        return dilation_schedule(self.encoder_blocks, scheme, in_encoder=True)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def variant(self, block_kind: str | None = None, dilation: bool | None = None) -> "ModelConfig":
        """Ablation variant; switching to ReLU blocks doubles both block counts."""
        cfg = self
        if block_kind is not None and block_kind != self.block_kind:
            factor = 2 if block_kind == "relu" else 0.5
            cfg = cfg.replace(block_kind=block_kind,
                              encoder_blocks=max(1, int(self.encoder_blocks * factor)),
                              decoder_blocks=max(1, int(self.decoder_blocks * factor)))
        if dilation is not None:
            cfg = cfg.replace(dilation=dilation)
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dilation_scheme"] = list(self.dilation_scheme)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "ModelConfig":
        return cls.from_dict(json.loads(s))


PRESETS = {
    "desk": ModelConfig(),
    "desk-pushing": ModelConfig(head="softmax256", cond_dim=2 * COND_SIZE, context_frames=2,
                                num_frames=6, top_channels=64),
    "paper": ModelConfig(frame_size=64, encoder_blocks=8, decoder_blocks=12, block_width=256,
                         lstm_channels=256, top_channels=768, head="bernoulli",
                         context_frames=10, num_frames=20),
    "paper-pushing": ModelConfig(frame_size=64, color_channels=3, encoder_blocks=8,
                                 decoder_blocks=12, block_width=256, lstm_channels=256,
                                 top_channels=1536, head="softmax256", cond_dim=2 * COND_SIZE,
                                 context_frames=2, num_frames=12),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return base.replace(**overrides) if overrides else base


# ---------------------------------------------------------------------------
# parameters


@dataclass
class CondParams:
    W: Tensor
    b: Tensor


@dataclass
class Params:
    enc_in_W: Tensor
    enc_in_b: Tensor
    enc_blocks: list
    lstm: ConvLSTMParams
    dec_blocks: list
    top_W: Tensor
    top_b: Tensor
    out_W: Tensor
    out_b: Tensor
    # vpn: kind-A first layer over the target frame, then fusion with the context
    first_W: Optional[Tensor] = None
    first_b: Optional[Tensor] = None
    fuse_W: Optional[Tensor] = None
    fuse_b: Optional[Tensor] = None
    # baseline: projection of the context alone
    ctx_W: Optional[Tensor] = None
    ctx_b: Optional[Tensor] = None
    enc_cond: list = field(default_factory=list)
    dec_cond: list = field(default_factory=list)

    def named(self) -> dict[str, Tensor]:
        return dict(named_tensors(self))

    def set_named(self, values: dict[str, np.ndarray]) -> None:
        own = self.named()
        if set(own) != set(values):
            missing = sorted(set(own) - set(values))
            extra = sorted(set(values) - set(own))
            raise ValueError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, arr in values.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != own[name].shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {own[name].shape}")
            own[name].data = arr.copy()


def init_params(config: ModelConfig, seed: int = 0) -> Params:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, forget bias 1."""
    rng = np.random.default_rng(seed)
    C, w, ch = config.color_channels, config.block_width, config.lstm_channels
    block_cls = RMBParams if config.block_kind == "rmb" else ReluBlockParams

    enc_in_W, enc_in_b = init_conv(rng, 1, 1, C, w), zeros_param(w)
    enc_blocks = [block_cls.init(rng, w) for _ in range(config.encoder_blocks)]
    lstm = ConvLSTMParams.init(rng, w, ch)
    extra = {}
    if config.kind == "vpn":
        k = config.first_kernel
        extra.update(first_W=init_conv(rng, k, k, C, w), first_b=zeros_param(w),
                     fuse_W=init_conv(rng, 1, 1, ch + w, w), fuse_b=zeros_param(w))
    else:
        extra.update(ctx_W=init_conv(rng, 1, 1, ch, w), ctx_b=zeros_param(w))
    dec_blocks = [block_cls.init(rng, w) for _ in range(config.decoder_blocks)]
    top_W, top_b = init_conv(rng, 1, 1, w, config.top_channels), zeros_param(config.top_channels)
    out_W = init_conv(rng, 1, 1, config.top_channels, config.output_channels)
    out_b = zeros_param(config.output_channels)
    if config.cond_dim:
        D = config.cond_dim
        # zero start: a conditioned model begins as its unconditioned twin
        extra["enc_cond"] = [CondParams(zeros_param(1, 1, D, w), zeros_param(w))
                             for _ in range(config.encoder_blocks + 1)]
        extra["dec_cond"] = [CondParams(zeros_param(1, 1, D, w), zeros_param(w))
                             for _ in range(config.decoder_blocks + 1)]
    return Params(enc_in_W, enc_in_b, enc_blocks, lstm, dec_blocks, top_W, top_b, out_W, out_b,
                  **extra)


# ---------------------------------------------------------------------------
# conditioning


def condition_inject(layer_input: Tensor, cond, weights: CondParams) -> Tensor:
    """Add a 1x1 convolution of the conditioning vector, broadcast over all positions.

    ``cond`` has shape ``(D,)`` for an unbatched ``(H, W, C)`` input or
    ``(B, D)`` for a batched ``(B, H, W, C)`` input.
    """
    cond = T.as_tensor(cond)
    D = weights.W.shape[2]
    if cond.shape[-1] != D:
        raise ValueError(f"conditioning vector has length {cond.shape[-1]}, expected {D}")
    lead = layer_input.shape[:-3]
    if cond.shape[:-1] != lead:
        raise ValueError(f"conditioning batch {cond.shape[:-1]} != input batch {lead}")
    c = T.conv2d(cond.reshape(*lead, 1, 1, D), weights.W, weights.b)
    return layer_input + c


def _inject(h, cond, cond_params, site):
    if cond is None or not cond_params:
        return h
    return condition_inject(h, cond, cond_params[site])


# ---------------------------------------------------------------------------
# encoder


def _as_unit(video) -> np.ndarray:
    return np.asarray(video, dtype=np.float64) / 255.0


def encoder_features(params: Params, config: ModelConfig, frames: Tensor, cond=None) -> Tensor:
    """Resolution-preserving residual stack applied to a batch of frames ``(B, N, N, C)``."""
    h = T.conv2d(frames, params.enc_in_W, params.enc_in_b)
    for site, (bp, d) in enumerate(zip(params.enc_blocks, config.encoder_dilations())):
        h = _inject(h, cond, params.enc_cond, site)
        h = block_forward(h, bp, dilation=d)
    return _inject(h, cond, params.enc_cond, len(params.enc_blocks))


def encode_frames(video, cond, config: ModelConfig, params: Params) -> list[Tensor]:
    """Context stack for a batch of videos ``(B, T, N, N, C)`` of intensities 0..255.

    Entry ``t`` is the ConvLSTM hidden state after consuming frames ``0..t``
    and conditions the generation of frame ``t + 1``.
    """
    x = np.asarray(video)
    if x.ndim == 4:
        x = x[None]
    if x.ndim != 5:
        raise ValueError(f"video must have shape (B, T, N, N, C), got {x.shape}")
    B, Tn, H, W, C = x.shape
    if Tn < 1:
        raise ValueError("need at least one frame to encode")
    if H != W or C != config.color_channels:
        raise ValueError(f"frame shape {(H, W, C)} incompatible with config "
                         f"(N={config.frame_size}, C={config.color_channels})")
    flat = Tensor(_as_unit(x).reshape(B * Tn, H, W, C))
    flat_cond = None
    if cond is not None and config.cond_dim:
        c = np.asarray(cond, dtype=np.float64).reshape(B, -1, config.cond_dim)[:, :Tn]
        flat_cond = Tensor(c.reshape(B * Tn, config.cond_dim))
    feats = encoder_features(params, config, flat, flat_cond)
    feats = feats.reshape(B, Tn, H, W, config.block_width)
    state = ConvLSTMState.zeros((B, H, W, config.lstm_channels))
    contexts = []
    for t in range(Tn):
        state = conv_lstm_step(feats[:, t], state, params.lstm)
        contexts.append(state.hidden)
    return contexts


# ---------------------------------------------------------------------------
# decoders


def _head(params: Params, config: ModelConfig, h: Tensor, masked: bool) -> Tensor:
    w, G = config.block_width, config.color_groups
    m_top = cached_mask("B", 1, 1, G, w, config.top_channels) if masked else None
    m_out = cached_mask("B", 1, 1, G, config.top_channels, config.output_channels) if masked else None
    top = T.relu(T.conv2d(h, params.top_W, params.top_b, mask=m_top))
    out = T.conv2d(top, params.out_W, params.out_b, mask=m_out)
    if config.head == "softmax256":
        return out.reshape(*out.shape[:-1], config.color_channels, NUM_LEVELS)
    return out


def _decoder_stack(params, config, h, cond, masked):
    for site, bp in enumerate(params.dec_blocks):
        h = _inject(h, cond, params.dec_cond, site)
        h = block_forward(h, bp, dilation=1, masked=masked, color_groups=config.color_groups)
    h = _inject(h, cond, params.dec_cond, len(params.dec_blocks))
    return _head(params, config, h, masked)


def _first_mask(config: ModelConfig):
    k = config.first_kernel
    return cached_mask("A", k, k, config.color_groups, config.color_channels, config.block_width)


_fuse_masks: dict = {}


def _fuse_mask(config: ModelConfig) -> np.ndarray:
    """Context channels feed every output group; masked features obey kind-B grouping."""
    key = (config.lstm_channels, config.block_width, config.color_groups)
    if key not in _fuse_masks:
        feat = build_mask("B", (1, 1), config.color_groups, config.block_width, config.block_width)
        ctx = np.ones((1, 1, config.lstm_channels, config.block_width))
        _fuse_masks[key] = np.concatenate([ctx, feat.mask], axis=2)
    return _fuse_masks[key]


def _check_context(context, shape_nnc, config):
    if context.shape[-3:-1] != shape_nnc[-3:-1]:
        raise ValueError(f"context extents {context.shape[-3:-1]} != frame extents {shape_nnc[-3:-1]}")
    if context.shape[-1] != config.lstm_channels:
        raise ValueError(f"context has {context.shape[-1]} channels, expected {config.lstm_channels}")


def _zero_context(shape_lead, config):
    N = config.frame_size
    return Tensor(np.zeros((*shape_lead, N, N, config.lstm_channels)))


def decode_frame(context, target_frame, config: ModelConfig, params: Params, cond=None,
                 frame_index: int | None = None) -> Tensor:
    """Teacher-forced decoder logits for one (batch of) target frame(s).

    ``target_frame`` holds intensities 0..255 with shape ``(N, N, C)`` or
    ``(B, N, N, C)``. Output is ``(..., N, N, C, 256)`` logits for the
    softmax head, ``(..., N, N, 1)`` logits for the Bernoulli head. Pass
    ``context=None`` only for the first frame (``frame_index=0``).
    """
    if config.kind != "vpn":
        raise ValueError("decode_frame needs a vpn config; use baseline_decode for the baseline")
    frame = np.asarray(target_frame)
    if frame.shape[-3:] != (config.frame_size, config.frame_size, config.color_channels):
        raise ValueError(f"target frame shape {frame.shape} does not match the config")
    if context is None:
        if frame_index != 0:
            raise ValueError("missing context: only the first frame decodes without one")
        context = _zero_context(frame.shape[:-3], config)
    context = T.as_tensor(context)
    _check_context(context, frame.shape, config)
    x = Tensor(_as_unit(frame))
    first = T.conv2d(x, params.first_W, params.first_b, mask=_first_mask(config))
    h = T.conv2d(T.concat([context, first], axis=-1), params.fuse_W, params.fuse_b,
                 mask=_fuse_mask(config))
    return _decoder_stack(params, config, h, _cond_tensor(cond), masked=True)


def baseline_decode(context, config: ModelConfig, params: Params, cond=None) -> Tensor:
    """Unmasked decoder logits; the frame being predicted is never an input."""
    if config.kind != "baseline":
        raise ValueError("baseline_decode needs a baseline config")
    context = T.as_tensor(context)
    if context.shape[-1] != config.lstm_channels:
        raise ValueError(f"context has {context.shape[-1]} channels, expected {config.lstm_channels}")
    h = T.conv2d(context, params.ctx_W, params.ctx_b)
    return _decoder_stack(params, config, h, _cond_tensor(cond), masked=False)


def _cond_tensor(cond):
    return None if cond is None else T.as_tensor(cond)


# ---------------------------------------------------------------------------
# teacher-forced likelihood


def _check_video(video, config: ModelConfig) -> np.ndarray:
    x = np.asarray(video)
    if x.ndim == 4:
        x = x[None]
    if x.ndim != 5:
        raise ValueError(f"video must have shape (B, T, N, N, C), got {x.shape}")
    N, C = config.frame_size, config.color_channels
    if x.shape[2:] != (N, N, C):
        raise ValueError(f"frames of shape {x.shape[2:]} do not match config (N={N}, C={C})")
    if x.size and (x.min() < 0 or x.max() > 255):
        raise ValueError("intensities must lie in 0..255")
    return x


def _check_cond(cond, video: np.ndarray, config: ModelConfig):
    if not config.cond_dim:
        return None
    B, Tn = video.shape[:2]
    if cond is None:
        return np.zeros((B, Tn, config.cond_dim))
    c = np.asarray(cond, dtype=np.float64)
    if c.ndim == 2:
        c = c[None]
    if c.shape != (B, Tn, config.cond_dim):
        raise ValueError(f"conditioning shape {c.shape} != {(B, Tn, config.cond_dim)}")
    return c


def frame_logits(params: Params, config: ModelConfig, video, cond=None,
                 first_frame: int | None = None) -> Tensor:
    """Logits for frames ``first_frame..T-1`` of every video, batch and time folded together."""
    x = _check_video(video, config)
    c = _check_cond(cond, x, config)
    B, Tn = x.shape[:2]
    first = config.context_frames if first_frame is None else first_frame
    if not 0 <= first < Tn:
        raise ValueError(f"first_frame {first} outside 0..{Tn - 1}")
    Tp = Tn - first
    contexts = encode_frames(x[:, :Tn - 1], None if c is None else c[:, :Tn - 1], config,
                             params) if Tn > 1 else []
    zero = _zero_context((B,), config)
    ctx = [contexts[t - 1] if t > 0 else zero for t in range(first, Tn)]
    ctx = T.stack(ctx, axis=1).reshape(B * Tp, *zero.shape[1:])
    dcond = None
    if c is not None:
        prev = np.concatenate([np.zeros((B, 1, config.cond_dim)), c[:, :-1]], axis=1)
        dcond = Tensor(prev[:, first:].reshape(B * Tp, config.cond_dim))
    targets = x[:, first:].reshape(B * Tp, *x.shape[2:])
    if config.kind == "vpn":
        return decode_frame(ctx, targets, config, params, dcond)
    return baseline_decode(ctx, config, params, dcond)


def frame_nll(params: Params, config: ModelConfig, video, cond=None,
              first_frame: int | None = None) -> Tensor:
    """Negative log-likelihood in nats of each evaluated frame, shape ``(B, T - first)``.

    Softmax head: exact discrete NLL of the 0..255 intensities. Bernoulli
    head: sigmoid cross-entropy against targets ``intensity / 255``.
    """
    x = _check_video(video, config)
    first = config.context_frames if first_frame is None else first_frame
    logits = frame_logits(params, config, x, cond, first)
    B, Tp = x.shape[0], x.shape[1] - first
    targets = x[:, first:].reshape(B * Tp, *x.shape[2:])
    if config.head == "softmax256":
        picked = T.gather_last(T.log_softmax(logits), targets.astype(np.int64))
        per = -T.tsum(picked, axis=(1, 2, 3))
    else:
        per = T.tsum(T.bce_with_logits(logits, _as_unit(targets)), axis=(1, 2, 3))
    return per.reshape(B, Tp)


def sequence_loss(params: Params, config: ModelConfig, video, cond=None) -> Tensor:
    """Mean nats per predicted frame over a batch; context frames never contribute."""
    per = frame_nll(params, config, video, cond, config.context_frames)
    return T.scale(T.tsum(per), 1.0 / per.size)


@dataclass
class LikelihoodReport:
    total_nats: float
    nats_per_frame: float
    per_frame: np.ndarray


def _likelihood(video, cond, config, params, first_frame, kind):
    if config.kind != kind:
        raise ValueError(f"config describes a {config.kind} model, not {kind}")
    if config.head != "softmax256":
        raise ValueError("exact discrete likelihood needs the softmax256 head; "
                         "use sigmoid_ce_loss for the bernoulli head")
    with T.no_grad():
        per = frame_nll(params, config, video, cond, first_frame).data
    total = float(per.sum())
    return LikelihoodReport(total, total / per.size, per)


def vpn_log_likelihood(video, cond, config: ModelConfig, params: Params,
                       first_frame: int = 0) -> LikelihoodReport:
    """Exact chain-rule NLL (nats) of the evaluated frames under the VPN."""
    return _likelihood(video, cond, config, params, first_frame, "vpn")


def baseline_log_likelihood(video, cond, config: ModelConfig, params: Params,
                            first_frame: int = 0) -> LikelihoodReport:
    """NLL under the baseline, which scores each frame from previous frames only."""
    return _likelihood(video, cond, config, params, first_frame, "baseline")


# ---------------------------------------------------------------------------
# sigmoid cross-entropy and its floor


def sigmoid_ce_loss(z, y):
    """``H(z, y) = -sum z log y + (1 - z) log(1 - y)`` in nats.

    ``y`` may be a Tensor (result is a scalar Tensor) or an array (result is
    a float). Logarithms are floored at 1e-12.
    """
    zd = np.asarray(z, dtype=np.float64)
    yd = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if yd.shape != zd.shape:
        raise ValueError(f"targets {zd.shape} and predictions {yd.shape} differ")
    if yd.size and (yd.min() < 0.0 or yd.max() > 1.0):
        raise ValueError("predictions must lie in [0, 1]")
    if zd.size and (zd.min() < 0.0 or zd.max() > 1.0):
        raise ValueError("targets must lie in [0, 1]")
    if isinstance(y, Tensor):
        zt = Tensor(zd)
        ll = zt * T.log(y, LOG_FLOOR) + (1.0 - zt) * T.log(1.0 - y, LOG_FLOOR)
        return -T.tsum(ll)
    ll = zd * np.log(np.maximum(yd, LOG_FLOOR)) + (1 - zd) * np.log(np.maximum(1 - yd, LOG_FLOOR))
    return float(-ll.sum())


def sigmoid_ce_per_frame(z, y) -> np.ndarray:
    """H(z, y) summed over each frame; the leading axis indexes frames."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return np.array([sigmoid_ce_loss(zf, yf) for zf, yf in zip(z, y)])


def lower_bound(frames) -> float:
    """Mean over frames of H(z, z), the best achievable sigmoid cross-entropy.

    ``frames`` holds values in [0, 1] with frames along the leading axis.
    """
    z = np.asarray(frames, dtype=np.float64)
    if z.size == 0 or z.shape[0] == 0:
        raise ValueError("lower bound of an empty dataset is undefined")
    return float(sigmoid_ce_per_frame(z, z).mean())


# ---------------------------------------------------------------------------
# sampling


def _draw_categorical(logits: np.ndarray, rng) -> tuple[int, float]:
    z = logits - logits.max()
    logp = z - np.log(np.exp(z).sum())
    cdf = np.cumsum(np.exp(logp))
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    k = min(k, len(cdf) - 1)
    return k, float(logp[k])


def _draw_bernoulli(logit: float, rng) -> tuple[int, float]:
    p = 0.5 * (1.0 + math.tanh(0.5 * logit))
    v = 1 if rng.random() < p else 0
    return v, float(-(np.logaddexp(0.0, logit) - v * logit))


def sample_frame(context, cond, config: ModelConfig, params: Params, rng,
                 decoder: Callable[[np.ndarray], np.ndarray] | None = None):
    """Generate one frame and the log-probability of the drawn values.

    VPN: pixels in raster order, channels R, G, B within a pixel, each
    drawn from the decoder rerun on the partially filled frame. Baseline:
    every value drawn independently from one decoder pass. Bernoulli draws
    are written as 0 or 255. ``context=None`` means the first frame.
    ``decoder`` overrides the network with any ``frame -> logits`` map.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    N, C = config.frame_size, config.color_channels
    if context is not None:
        context = T.as_tensor(context)
        if context.ndim == 3:
            context = context.reshape(1, *context.shape)
    cvec = None if cond is None or not config.cond_dim else \
        np.asarray(cond, dtype=np.float64).reshape(1, config.cond_dim)

    if decoder is None:
        def decoder(frame):
            with T.no_grad():
                if config.kind == "vpn":
                    out = decode_frame(context, frame[None], config, params, cvec,
                                       frame_index=0 if context is None else None)
                else:
                    ctx = context if context is not None else _zero_context((1,), config)
                    out = baseline_decode(ctx, config, params, cvec)
            return out.data[0]

    frame = np.zeros((N, N, C), dtype=np.int64)
    logprob = 0.0
    softmax = config.head == "softmax256"
    fixed = None if config.kind == "vpn" else decoder(frame)
    for i in range(N):
        for j in range(N):
            for ch in range(C):
                logits = fixed if fixed is not None else decoder(frame)
                if softmax:
                    v, lp = _draw_categorical(logits[i, j, ch], rng)
                    frame[i, j, ch] = v
                else:
                    v, lp = _draw_bernoulli(float(logits[i, j, ch]), rng)
                    frame[i, j, ch] = 255 * v
                logprob += lp
    return frame.astype(np.uint8), logprob


def sample_video(context_video, cond, config: ModelConfig, params: Params, n_frames: int, rng):
    """Continue ``context_video`` ``(Tc, N, N, C)`` by ``n_frames`` sampled frames.

    ``cond`` (when the model is conditional) is ``(Tc + n_frames, D)``;
    frame ``t`` is decoded with ``cond[t - 1]``. Returns the generated
    frames and their total log-probability.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    N, C = config.frame_size, config.color_channels
    video = np.asarray(context_video, dtype=np.int64).reshape(-1, N, N, C)
    c = None
    if config.cond_dim:
        c = np.zeros((len(video) + n_frames, config.cond_dim)) if cond is None else \
            np.asarray(cond, dtype=np.float64)
    logprob = 0.0
    out = []
    for _ in range(n_frames):
        t = len(video)
        if t == 0:
            ctx, cvec = None, (np.zeros(config.cond_dim) if c is not None else None)
        else:
            with T.no_grad():
                ctx = encode_frames(video[None], None if c is None else c[None, :t],
                                    config, params)[-1]
            cvec = None if c is None else c[t - 1]
        frame, lp = sample_frame(ctx, cvec, config, params, rng)
        logprob += lp
        out.append(frame)
        video = np.concatenate([video, frame[None].astype(np.int64)])
    return np.stack(out).astype(np.uint8) if out else np.zeros((0, N, N, C), np.uint8), logprob


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"VPNK"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(config: ModelConfig, params: Params) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = config.to_json().encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    named = params.named()
    buf.write(struct.pack("<I", len(named)))
    for name, t in named.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, config: ModelConfig, params: Params) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(config, params))


class CheckpointError(ValueError):
    pass


def parse_checkpoint(data: bytes) -> tuple[ModelConfig, Params]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}, "
                                  f"have {len(view) - pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_json(bytes(take(n)).decode())
    (count,) = struct.unpack("<I", take(4))
    values = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", take(4))
        name = bytes(take(ln)).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        values[name] = np.frombuffer(bytes(take(8 * size)), dtype="<f8").reshape(shape)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after the last parameter")
    params = init_params(config, 0)
    params.set_named(values)
    return config, params


def load_checkpoint(path) -> tuple[ModelConfig, Params]:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())
