"""Diagnostic probes run on freshly initialized models."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import blocks as B
from . import model as M
from . import tensor as T


@dataclass
class ProbeResult:
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        detail = ", ".join(f"{k}={v}" for k, v in self.measured.items())
        return f"[{status}] {self.name}: {detail}"


def probe_config(kind="vpn", size=6, frames=3, colors=3, head="softmax256", **overrides):
    base = dict(kind=kind, frame_size=size, color_channels=colors, encoder_blocks=1,
                decoder_blocks=2, block_width=6, lstm_channels=6, top_channels=6, head=head,
                context_frames=1, num_frames=frames)
    base.update(overrides)
    return M.ModelConfig(**base)


def _randomize_biases(params: M.Params, rng) -> None:
    # biases start at zero; random values make the probes see every path
    for name, p in params.named().items():
        if p.ndim == 1:
            p.data = rng.uniform(-0.5, 0.5, size=p.shape)


def _all_logits(config, params, video, cond):
    with T.no_grad():
        out = M.frame_logits(params, config, video, cond, first_frame=0).data
    Tn, N, C = config.num_frames, config.frame_size, config.color_channels
    return out.reshape(Tn, N, N, C, -1) if config.head == "softmax256" else \
        out.reshape(Tn, N, N, C, 1)


def causality_probe(config: M.ModelConfig, seed: int = 0) -> ProbeResult:
    """Perturb every input value; logits at that position or earlier in (t, i, j, c)
    order must not change in any bit.

    For the baseline the allowed dependency set is the earlier frames only,
    so every logit of frame ``t`` must ignore all of frame ``t``.
    """
    rng = np.random.default_rng(seed)
    params = M.init_params(config, seed)
    _randomize_biases(params, rng)
    Tn, N, C = config.num_frames, config.frame_size, config.color_channels
    video = rng.integers(0, 256, size=(1, Tn, N, N, C))
    cond = rng.standard_normal((1, Tn, config.cond_dim)) if config.cond_dim else None
    base = _all_logits(config, params, video, cond)
    order = np.arange(Tn * N * N * C).reshape(Tn, N, N, C)
    frame_of = np.broadcast_to(np.arange(Tn)[:, None, None, None], order.shape)
    leaks = changed_later = 0
    for q, (t, i, j, c) in enumerate(np.ndindex(Tn, N, N, C)):
        pert = video.copy()
        pert[0, t, i, j, c] = (pert[0, t, i, j, c] + 97) % 256
        out = _all_logits(config, params, pert, cond)
        diff = np.any(out != base, axis=-1)
        if config.kind == "vpn":
            protected = order <= q
        else:
            protected = frame_of <= t
        leaks += int(np.sum(diff & protected))
        changed_later += int(np.sum(diff & ~protected))
    name = "causality" if config.kind == "vpn" else "baseline-independence"
    return ProbeResult(name, leaks == 0 and changed_later > 0,
                       {"perturbations": int(order.size), "leaked": leaks,
                        "downstream_changes": changed_later})


# ---------------------------------------------------------------------------
# receptive field


def analytic_footprint(dilations, kernel: int = 3, mus_per_block: int = 2) -> set:
    """Offsets reachable through stacked dilated convs: Minkowski sums of tap sets."""
    reach = {0}
    for d in dilations:
        taps = {d * (k - kernel // 2) for k in range(kernel)}
        for _ in range(mus_per_block):
            reach = {a + b for a in reach for b in taps}
    return {(a, b) for a in reach for b in reach}


def measured_footprint(config: M.ModelConfig, seed: int = 0) -> set:
    """Nonzero support of d(encoder output at the center pixel)/d(input frame)."""
    rng = np.random.default_rng(seed)
    params = M.init_params(config, seed)
    _randomize_biases(params, rng)
    N, C = config.frame_size, config.color_channels
    x = T.Tensor(rng.uniform(0, 1, size=(1, N, N, C)), requires_grad=True)
    feats = M.encoder_features(params, config, x)
    ci = N // 2
    T.backward(T.tsum(feats[0, ci, ci]))
    support = np.argwhere(np.any(x.grad[0] != 0, axis=-1))
    return {(int(i) - ci, int(j) - ci) for i, j in support}


def receptive_field_probe(dilation: bool = True, blocks: int = 4, size: int = 64,
                          seed: int = 0) -> ProbeResult:
    cfg = M.ModelConfig(frame_size=size, encoder_blocks=blocks, decoder_blocks=1,
                        block_width=4, lstm_channels=2, top_channels=2, dilation=dilation,
                        context_frames=1, num_frames=2)
    lim = size // 2
    expected = {(a, b) for a, b in analytic_footprint(cfg.encoder_dilations())
                if -lim <= a < size - lim and -lim <= b < size - lim}
    got = measured_footprint(cfg, seed)
    width = 1 + max(a for a, _ in got) - min(a for a, _ in got) if got else 0
    return ProbeResult(f"receptive-field(dilation={'on' if dilation else 'off'})", got == expected,
                       {"dilations": cfg.encoder_dilations(), "measured_width": width,
                        "measured_taps": len(got), "analytic_taps": len(expected)})


# ---------------------------------------------------------------------------
# gradient checks


def gradcheck_suite(seed: int = 0, tolerance: float = 1e-4) -> list[ProbeResult]:
    """Finite-difference checks for every layer type, both heads and both losses."""
    rng = np.random.default_rng(seed)
    results = []

    def record(name, f, at):
        rep = T.finite_diff_check(f, at, tolerance)
        results.append(ProbeResult(f"gradcheck:{name}", rep.passed,
                                   {"max_rel_error": f"{rep.max_rel_error:.2e}"}))
        return rep

    x = rng.uniform(-2, 2, size=(2, 5, 5, 3))
    w = rng.uniform(-1, 1, size=(3, 3, 3, 4))
    mask = B.build_mask("B", (3, 3), 1, 3, 4)
    record("conv2d/input", lambda t: T.conv2d(t, T.Tensor(w)), x)
    record("conv2d/weights", lambda t: T.conv2d(T.Tensor(x), t), w)
    record("conv2d/dilated", lambda t: T.conv2d(t, T.Tensor(w), dilation=2), x)
    rep = record("conv2d/masked-weights", lambda t: T.conv2d(T.Tensor(x), t, mask=mask), w)
    masked_zero = bool(np.all(rep.analytic[mask.mask == 0] == 0.0))
    results.append(ProbeResult("gradcheck:masked-positions-zero", masked_zero, {}))

    h = rng.uniform(-2, 2, size=(1, 4, 4, 2))
    mu = B.MUParams.init(rng, 2)
    record("mu/input", lambda t: B.mu_forward(t, mu), h)
    record("mu/W1", lambda t: B.mu_forward(T.Tensor(h), B.MUParams(t, mu.W2, mu.W3, mu.W4,
                                                                   mu.b1, mu.b2, mu.b3, mu.b4)),
           mu.W1.data)
    h4 = rng.uniform(-2, 2, size=(1, 4, 4, 4))
    rmb = B.RMBParams.init(rng, 4)
    record("rmb/input", lambda t: B.rmb_forward(t, rmb, dilation=2), h4)
    record("rmb/masked-input", lambda t: B.rmb_forward(t, rmb, masked=True), h4)
    relu_p = B.ReluBlockParams.init(rng, 4)
    record("relu-block/input", lambda t: B.relu_block_forward(t, relu_p), h4)
    lstm = B.ConvLSTMParams.init(rng, 2, 3)
    cell = T.Tensor(rng.uniform(-1, 1, size=(1, 4, 4, 3)))
    hid = T.Tensor(rng.uniform(-1, 1, size=(1, 4, 4, 3)))
    record("convlstm/input",
           lambda t: B.conv_lstm_step(t, B.ConvLSTMState(hid, cell), lstm).hidden, h)
    record("convlstm/hidden",
           lambda t: B.conv_lstm_step(T.Tensor(h), B.ConvLSTMState(t, cell), lstm).cell, hid.data)

    logits = rng.uniform(-2, 2, size=(2, 3, 5))
    idx = rng.integers(0, 5, size=(2, 3))
    record("softmax-head/log_softmax", lambda t: T.log_softmax(t), logits)
    record("softmax-head/nll", lambda t: -T.tsum(T.gather_last(T.log_softmax(t), idx)), logits)
    z = rng.uniform(0, 1, size=(2, 3))
    record("bernoulli-head/bce", lambda t: T.tsum(T.bce_with_logits(t, z)), logits[..., 0])
    record("sigmoid-ce-loss", lambda t: M.sigmoid_ce_loss(z, T.sigmoid(t)), logits[..., 0])

    for head in ("softmax256", "bernoulli"):
        cfg = M.ModelConfig(frame_size=4, color_channels=1, encoder_blocks=1, decoder_blocks=1,
                            block_width=4, lstm_channels=2, top_channels=4, head=head,
                            context_frames=1, num_frames=2)
        params = M.init_params(cfg, seed)
        video = rng.integers(0, 256, size=(1, 2, 4, 4, 1))
        for pname in ("enc_blocks.0.mu_a.W2", "lstm.W", "first_W", "out_W"):
            target = params.named()[pname]

            def f(t, target=target, params=params, cfg=cfg, video=video):
                return _loss_with(params, cfg, video, target, t)

            record(f"model-{head}/{pname}", f, target.data.copy())
    return results


def _loss_with(params, cfg, video, target, t):
    # swap the parameter object for the probe tensor, evaluate, then restore
    holders = []
    for obj in _walk(params):
        for k, v in vars(obj).items():
            if v is target:
                holders.append((obj, k))
                setattr(obj, k, t)
    try:
        return M.sequence_loss(params, cfg, video)
    finally:
        for obj, k in holders:
            setattr(obj, k, target)


def _walk(obj):
    if dataclasses.is_dataclass(obj):
        yield obj
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name))
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from _walk(item)


def lower_bound_probe() -> ProbeResult:
    z = np.full((1, 64, 64, 1), 0.5)
    got = M.lower_bound(z)
    want = 64 * 64 * math.log(2)
    return ProbeResult("lower-bound(all-0.5, 64x64)", abs(got - want) <= 1e-6,
                       {"measured": f"{got:.6f}", "analytic": f"{want:.6f}"})
