"""Gated residual blocks and causal masks, plus the convolutional LSTM cell."""

from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

COLOR_ORDER = ("R", "G", "B")


# ---------------------------------------------------------------------------
# parameter containers


def init_conv(rng: np.random.Generator, kh: int, kw: int, cin: int, cout: int) -> Tensor:
    s = 1.0 / np.sqrt(kh * kw * cin)
    return Tensor(rng.uniform(-s, s, size=(kh, kw, cin, cout)), requires_grad=True)


def zeros_param(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every Tensor reachable through
    dataclass fields, lists and dicts, in declaration order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_tensors(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for k, item in obj.items():
            yield from named_tensors(item, f"{prefix}.{k}" if prefix else str(k))


@dataclass
class MUParams:
    W1: Tensor
    W2: Tensor
    W3: Tensor
    W4: Tensor
    b1: Tensor
    b2: Tensor
    b3: Tensor
    b4: Tensor

    def __post_init__(self):
        shapes = {w.shape for w in (self.W1, self.W2, self.W3, self.W4)}
        if len(shapes) != 1:
            raise ValueError(f"MU weights must share one shape, got {sorted(shapes)}")

    @classmethod
    def init(cls, rng, channels: int, kernel: int = 3) -> "MUParams":
        ws = [init_conv(rng, kernel, kernel, channels, channels) for _ in range(4)]
        bs = [zeros_param(channels) for _ in range(4)]
        return cls(*ws, *bs)


@dataclass
class RMBParams:
    P_in: Tensor
    b_in: Tensor
    mu_a: MUParams
    mu_b: MUParams
    P_out: Tensor
    b_out: Tensor

    @classmethod
    def init(cls, rng, width: int) -> "RMBParams":
        if width % 2:
            raise ValueError(f"residual block width must be even, got {width}")
        c = width // 2
        return cls(init_conv(rng, 1, 1, width, c), zeros_param(c),
                   MUParams.init(rng, c), MUParams.init(rng, c),
                   init_conv(rng, 1, 1, c, width), zeros_param(width))


@dataclass
class ReluBlockParams:
    """Bottleneck residual block with ReLUs, the MU-free ablation."""

    P_in: Tensor
    b_in: Tensor
    W: Tensor
    b: Tensor
    P_out: Tensor
    b_out: Tensor

    @classmethod
    def init(cls, rng, width: int) -> "ReluBlockParams":
        if width % 2:
            raise ValueError(f"residual block width must be even, got {width}")
        c = width // 2
        return cls(init_conv(rng, 1, 1, width, c), zeros_param(c),
                   init_conv(rng, 3, 3, c, c), zeros_param(c),
                   init_conv(rng, 1, 1, c, width), zeros_param(width))


@dataclass
class ConvLSTMParams:
    W: Tensor  # (3, 3, Cx + Ch, 4 Ch), gate order i, f, o, g
    b: Tensor

    @classmethod
    def init(cls, rng, input_channels: int, hidden_channels: int, kernel: int = 3,
             forget_bias: float = 1.0) -> "ConvLSTMParams":
        W = init_conv(rng, kernel, kernel, input_channels + hidden_channels, 4 * hidden_channels)
        b = np.zeros(4 * hidden_channels)
        b[hidden_channels:2 * hidden_channels] = forget_bias
        return cls(W, Tensor(b, requires_grad=True))

    @property
    def hidden_channels(self) -> int:
        return self.b.shape[0] // 4


@dataclass
class ConvLSTMState:
    hidden: Tensor
    cell: Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ValueError(f"hidden {self.hidden.shape} and cell {self.cell.shape} differ")

    @classmethod
    def zeros(cls, shape) -> "ConvLSTMState":
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


# ---------------------------------------------------------------------------
# causal masks


@dataclass(frozen=True, eq=False)
class MaskSpec:
    kind: str
    kernel_size: tuple
    color_groups: int
    group_in: np.ndarray
    group_out: np.ndarray
    mask: np.ndarray
    channel_order: tuple = COLOR_ORDER

    @property
    def shape(self):
        return self.mask.shape


def color_group_map(channels: int, color_groups: int) -> np.ndarray:
    """Contiguous partition of channels into color groups (R, G, B in order).

    Group sizes differ by at most one when ``channels`` is not a multiple
    of ``color_groups``.
    """
    if channels < color_groups:
        raise ValueError(f"{channels} channels cannot be split into {color_groups} color groups")
    return np.arange(channels) * color_groups // channels


def build_mask(kind: str, kernel=(3, 3), color_groups: int = 1,
               channels_in: int = 1, channels_out: int = 1) -> MaskSpec:
    """Raster-order causal mask of shape ``(kh, kw, Cin, Cout)``.

    Kind ``A`` hides the current pixel's own color group (and later ones);
    kind ``B`` lets a group read itself at the center tap.
    """
    if kind not in ("A", "B"):
        raise ValueError(f"mask kind must be 'A' or 'B', got {kind!r}")
    kh, kw = kernel
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"mask kernel extents must be odd, got {kernel}")
    if color_groups not in (1, 3):
        raise ValueError(f"color_groups must be 1 or 3, got {color_groups}")
    g_in = color_group_map(channels_in, color_groups)
    g_out = color_group_map(channels_out, color_groups)
    m = np.zeros((kh, kw, channels_in, channels_out))
    ci, cj = kh // 2, kw // 2
    m[:ci] = 1.0
    m[ci, :cj] = 1.0
    if kind == "A":
        center = g_in[:, None] < g_out[None, :]
    else:
        center = g_in[:, None] <= g_out[None, :]
    m[ci, cj] = center.astype(np.float64)
    return MaskSpec(kind, (kh, kw), color_groups, g_in, g_out, m)


@functools.lru_cache(maxsize=None)
def cached_mask(kind, kh, kw, color_groups, cin, cout) -> MaskSpec:
    return build_mask(kind, (kh, kw), color_groups, cin, cout)


def _tiled_mask(mask: MaskSpec | None, times: int):
    return None if mask is None else np.concatenate([mask.mask] * times, axis=3)


# ---------------------------------------------------------------------------
# forward passes


def mu_forward(h: Tensor, params: MUParams, dilation: int = 1,
               mask: MaskSpec | None = None) -> Tensor:
    """Multiplicative unit: three sigmoid gates and a tanh update over ``h``.

    The four convolutions share one input, so they run as a single
    convolution over the channel-concatenated weights.
    """
    kh, kw, cin, cout = params.W1.shape
    if cin != cout:
        raise ValueError(f"MU needs equal in/out width for the gated input term, got {cin}->{cout}")
    if h.shape[-1] != cin:
        raise ValueError(f"input has {h.shape[-1]} channels, MU expects {cin}")
    W = T.concat([params.W1, params.W2, params.W3, params.W4], axis=3)
    b = T.concat([params.b1, params.b2, params.b3, params.b4], axis=0)
    pre = T.conv2d(h, W, b, dilation=dilation, mask=_tiled_mask(mask, 4))
    c = cout
    g1 = T.sigmoid(pre[..., 0:c])
    g2 = T.sigmoid(pre[..., c:2 * c])
    g3 = T.sigmoid(pre[..., 2 * c:3 * c])
    u = T.tanh(pre[..., 3 * c:4 * c])
    return g1 * T.tanh(g2 * h + g3 * u)


def _block_masks(width: int, masked: bool, color_groups: int):
    if not masked:
        return None, None, None
    c = width // 2
    return (cached_mask("B", 1, 1, color_groups, width, c),
            cached_mask("B", 3, 3, color_groups, c, c),
            cached_mask("B", 1, 1, color_groups, c, width))


def rmb_forward(h: Tensor, params: RMBParams, dilation: int = 1, masked: bool = False,
                color_groups: int = 1) -> Tensor:
    """Residual multiplicative block: 1x1 halving, two MUs, 1x1 expansion, skip."""
    width = h.shape[-1]
    if width % 2:
        raise ValueError(f"residual block needs an even channel count, got {width}")
    m_in, m_mu, m_out = _block_masks(width, masked, color_groups)
    h1 = T.conv2d(h, params.P_in, params.b_in, mask=m_in)
    h2 = mu_forward(h1, params.mu_a, dilation, m_mu)
    h3 = mu_forward(h2, params.mu_b, dilation, m_mu)
    h4 = T.conv2d(h3, params.P_out, params.b_out, mask=m_out)
    return h + h4


def relu_block_forward(h: Tensor, params: ReluBlockParams, dilation: int = 1,
                       masked: bool = False, color_groups: int = 1) -> Tensor:
    width = h.shape[-1]
    if width % 2:
        raise ValueError(f"residual block needs an even channel count, got {width}")
    m_in, m_mid, m_out = _block_masks(width, masked, color_groups)
    x = T.conv2d(T.relu(h), params.P_in, params.b_in, mask=m_in)
    x = T.conv2d(T.relu(x), params.W, params.b, dilation=dilation, mask=m_mid)
    x = T.conv2d(T.relu(x), params.P_out, params.b_out, mask=m_out)
    return h + x


def block_forward(h, params, dilation=1, masked=False, color_groups=1):
    if isinstance(params, RMBParams):
        return rmb_forward(h, params, dilation, masked, color_groups)
    return relu_block_forward(h, params, dilation, masked, color_groups)


def conv_lstm_step(x: Tensor, state: ConvLSTMState, weights: ConvLSTMParams) -> ConvLSTMState:
    """One ConvLSTM update (no peepholes); gates read ``[x, h_prev]`` through one 3x3 conv."""
    if x.shape[:-1] != state.hidden.shape[:-1]:
        raise ValueError(f"input extents {x.shape[:-1]} != state extents {state.hidden.shape[:-1]}")
    ch = weights.hidden_channels
    pre = T.conv2d(T.concat([x, state.hidden], axis=-1), weights.W, weights.b)
    i = T.sigmoid(pre[..., 0:ch])
    f = T.sigmoid(pre[..., ch:2 * ch])
    o = T.sigmoid(pre[..., 2 * ch:3 * ch])
    g = T.tanh(pre[..., 3 * ch:4 * ch])
    cell = f * state.cell + i * g
    return ConvLSTMState(o * T.tanh(cell), cell)


def dilation_schedule(num_blocks: int, scheme=(1, 2, 4, 8), in_encoder: bool = True) -> list[int]:
    """Per-block dilation rates: the scheme cycled in encoders, all ones in decoders."""
    if num_blocks < 1:
        raise ValueError(f"num_blocks must be >= 1, got {num_blocks}")
    scheme = list(scheme)
    if not scheme:
        raise ValueError("dilation scheme is empty")
    if not in_encoder:
        return [1] * num_blocks
    return [int(scheme[i % len(scheme)]) for i in range(num_blocks)]
