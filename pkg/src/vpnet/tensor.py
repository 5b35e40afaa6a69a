"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every operation that takes a :class:`Tensor` records a closure mapping the
output gradient to gradients for its inputs. :func:`backward` walks the
record in reverse topological order and accumulates into the ``grad`` slot
of every leaf that requires a gradient.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MAX_RANK = 5

_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable recording; forward results carry no parents."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "node_id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"rank {arr.ndim} exceeds the maximum rank {MAX_RANK}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return scale(tsum(self), 1.0 / self.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not match") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def _expit(x: np.ndarray) -> np.ndarray:
    # tanh form is exact in both tails, unlike 1/(1+exp(-x))
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _expit(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor, floor: float = 1e-12) -> Tensor:
    x = np.maximum(a.data, floor)
    live = a.data >= floor
    return _result(np.log(x), (a,), lambda g: (g * live / x,))


_POINTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "exp": exp, "log": log,
              "add": add, "sub": sub, "mul": mul, "scale": scale}


def pointwise(op_kind: str, *args) -> Tensor:
    """Dispatch an elementwise op by name (``sigmoid``, ``tanh``, ``add``, ``mul``, ``scale``...)."""
    try:
        fn = _POINTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown pointwise op {op_kind!r}") from None
    if op_kind in ("add", "sub", "mul"):
        a, b = (as_tensor(x) for x in args)
        if a.shape != b.shape:
            raise ValueError(f"{op_kind}: shapes {a.shape} and {b.shape} differ")
    return fn(*args)


# ---------------------------------------------------------------------------
# structural


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), back)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None
               for p in parts)


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic(idx)

    def back(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _result(np.array(a.data[idx]), (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, back)


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: tuple
    channels_in: int
    channels_out: int
    dilation: int = 1

    def __post_init__(self):
        kh, kw = self.kernel_size
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel extents must be odd for same padding, got {self.kernel_size}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be positive, got {self.dilation}")
        if self.channels_in < 1 or self.channels_out < 1:
            raise ValueError("channel counts must be positive")

    @property
    def weight_shape(self):
        return (*self.kernel_size, self.channels_in, self.channels_out)


def _mask_array(mask):
    if mask is None:
        return None
    return np.asarray(getattr(mask, "mask", mask), dtype=np.float64)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, dilation: int = 1,
           mask=None, spec: ConvSpec | None = None) -> Tensor:
    """Same-padded cross-correlation over NHWC input.

    ``x`` is ``(H, W, Cin)`` or ``(B, H, W, Cin)``; ``w`` is ``(kh, kw, Cin, Cout)``.
    Tap ``(a, b)`` reads the input at offset ``((a - kh//2) * dilation,
    (b - kw//2) * dilation)``. When ``mask`` is given (a MaskSpec or a 0/1
    array shaped like ``w``), the effective weights are ``w * mask`` so
    masked taps contribute nothing and receive zero gradient.
    """
    x, w = as_tensor(x), as_tensor(w)
    if spec is not None:
        dilation = spec.dilation
        if w.shape != spec.weight_shape:
            raise ValueError(f"weights {w.shape} do not match spec {spec.weight_shape}")
    if w.ndim != 4:
        raise ValueError(f"weights must be rank 4 (kh, kw, Cin, Cout), got shape {w.shape}")
    kh, kw, cin, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got kh={kh}, kw={kw}")
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ValueError(f"input must be rank 3 or 4, got shape {x.shape}")
    if x.shape[-1] != cin:
        raise ValueError(f"input channels {x.shape[-1]} != weight channels_in {cin}")
    m = _mask_array(mask)
    if m is not None and m.shape != w.shape:
        raise ValueError(f"mask shape {m.shape} != weight shape {w.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")

    xd = x.data[None] if unbatched else x.data
    B, H, W, _ = xd.shape
    wm = w.data * m if m is not None else w.data
    d = int(dilation)
    ph, pw = d * (kh // 2), d * (kw // 2)

    if kh == 1 and kw == 1:
        cols = xd.reshape(-1, cin)
    else:
        xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        cols = np.empty((B, H, W, kh, kw, cin))
        for a in range(kh):
            for b in range(kw):
                cols[:, :, :, a, b, :] = xp[:, a * d:a * d + H, b * d:b * d + W, :]
        cols = cols.reshape(B * H * W, kh * kw * cin)
    out = cols @ wm.reshape(-1, cout)
    if bias is not None:
        out += bias.data
    out = out.reshape(B, H, W, cout)
    if unbatched:
        out = out[0]

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        if m is not None:
            gw = gw * m
        gx = None
        if x.requires_grad:
            gcols = g2 @ wm.reshape(-1, cout).T
            if kh == 1 and kw == 1:
                gx = gcols.reshape(xd.shape)
            else:
                gcols = gcols.reshape(B, H, W, kh, kw, cin)
                gxp = np.zeros((B, H + 2 * ph, W + 2 * pw, cin))
                for a in range(kh):
                    for b in range(kw):
                        gxp[:, a * d:a * d + H, b * d:b * d + W, :] += gcols[:, :, :, a, b, :]
                gx = gxp[:, ph:ph + H, pw:pw + W, :]
            if unbatched:
                gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, back)


# ---------------------------------------------------------------------------
# likelihood pieces


def log_softmax(logits: Tensor) -> Tensor:
    """Log-softmax along the final axis, shifted by the per-slice max."""
    x = logits.data
    if x.shape[-1] < 2:
        raise ValueError(f"need at least 2 classes on the last axis, got {x.shape[-1]}")
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(out, (logits,), back)


softmax_logits_to_logprob = log_softmax


def gather_last(values: Tensor, idx: np.ndarray) -> Tensor:
    """Pick ``values[..., idx[...]]`` along the final axis."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != values.shape[:-1]:
        raise ValueError(f"index shape {idx.shape} != leading shape {values.shape[:-1]}")
    picked = np.take_along_axis(values.data, idx[..., None], axis=-1)[..., 0]
    shape = values.shape

    def back(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    return _result(picked, (values,), back)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise ``-z log y - (1-z) log(1-y)`` with ``y = sigmoid(logits)``.

    Uses ``softplus(l) - z*l``, which equals the clamped form whenever
    ``y`` stays above the 1e-12 floor.
    """
    z = np.asarray(targets, dtype=np.float64)
    l = logits.data
    if z.shape != l.shape:
        raise ValueError(f"targets {z.shape} != logits {l.shape}")
    out = np.logaddexp(0.0, l) - z * l
    y = _expit(l)
    return _result(out, (logits,), lambda g: (g * (y - z),))


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {loss.node_id: np.ones(loss.shape)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


def zero_grad(params) -> None:
    for p in (params.values() if isinstance(params, dict) else params):
        p.grad = None


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple | None
    tolerance: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    nonfinite_at: tuple | None = None

    @property
    def passed(self) -> bool:
        return self.nonfinite_at is None and self.max_rel_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero slopes from dominating."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(f: Callable[[Tensor], Tensor], at, tolerance: float = 1e-4,
                      eps: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output coordinate participates.
    """
    at = np.array(as_tensor(at).data, dtype=np.float64)
    probe = None

    def scalar(x):
        nonlocal probe
        y = f(x)
        if y.size == 1:
            return y.reshape(())
        if probe is None:
            probe = np.random.default_rng(seed).standard_normal(y.shape)
        return tsum(mul(y, Tensor(probe)))

    x = Tensor(at.copy(), requires_grad=True)
    y = scalar(x)
    if not np.all(np.isfinite(y.data)):
        return GradCheckReport(np.inf, None, tolerance, np.zeros_like(at), np.zeros_like(at), ())
    backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(at)

    numeric = np.zeros_like(at)
    with no_grad():
        for i in np.ndindex(at.shape):
            xp = at.copy()
            xp[i] += eps
            fp = scalar(Tensor(xp)).item()
            xp[i] -= 2 * eps
            fm = scalar(Tensor(xp)).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(np.inf, i, tolerance, analytic, numeric, i)
            numeric[i] = (fp - fm) / (2 * eps)

    err = relative_error(analytic, numeric)
    worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else None
    return GradCheckReport(float(err.max()) if err.size else 0.0,
                           tuple(int(v) for v in worst) if worst is not None else None,
                           tolerance, analytic, numeric)
