import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpnet import data as D
from vpnet import model as M
from vpnet import train as TR
from vpnet.tensor import Tensor

TINY = M.ModelConfig(frame_size=8, encoder_blocks=1, decoder_blocks=1, block_width=4,
                     lstm_channels=4, top_channels=4, context_frames=2, num_frames=3)
TINY_DATA = D.MovingSpriteConfig(canvas=8, num_sprites=1, frames=3, sprite_size=3)


def param(value):
    return {"p": Tensor(np.array([value], dtype=np.float64), requires_grad=True)}


# --- RMSProp ------------------------------------------------------------------------


def test_zero_gradient_leaves_params():
    p = param(1.0)
    s = TR.RMSPropState(learning_rate=0.1)
    TR.rmsprop_step(p, {"p": np.zeros(1)}, s)
    assert p["p"].data[0] == 1.0 and s.step == 1


def test_single_step_hand_value():
    p = param(1.0)
    TR.rmsprop_step(p, {"p": np.ones(1)}, TR.RMSPropState(learning_rate=0.1))
    assert p["p"].data[0] == pytest.approx(1 - 0.1 / math.sqrt(0.1 + 1e-8), abs=1e-12)
    assert p["p"].data[0] == pytest.approx(0.683772, abs=1e-6)


def test_two_steps_hand_computation():
    p = param(0.5)
    s = TR.RMSPropState(learning_rate=0.01)
    TR.rmsprop_step(p, {"p": np.array([2.0])}, s)
    TR.rmsprop_step(p, {"p": np.array([-1.0])}, s)
    acc1 = 0.1 * 4.0
    acc2 = 0.9 * acc1 + 0.1 * 1.0
    want = 0.5 - 0.01 * 2 / math.sqrt(acc1 + 1e-8) + 0.01 / math.sqrt(acc2 + 1e-8)
    assert p["p"].data[0] == pytest.approx(want, abs=1e-15)
    assert s.accumulators["p"][0] == pytest.approx(acc2, abs=1e-15)


def test_non_finite_gradient_aborts_without_mutation():
    params = {"a": param(1.0)["p"], "b": param(2.0)["p"]}
    s = TR.RMSPropState()
    with pytest.raises(TR.NonFiniteError) as e:
        TR.rmsprop_step(params, {"a": np.ones(1), "b": np.array([np.nan])}, s)
    assert e.value.name == "b"
    assert params["a"].data[0] == 1.0 and s.accumulators == {} and s.step == 0


def test_missing_gradient_counts_as_zero():
    p = param(3.0)
    TR.rmsprop_step(p, None, TR.RMSPropState())
    assert p["p"].data[0] == 3.0


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0]), "c": None}
    assert TR.clip_global_norm(g, 1.0) == 5.0
    assert np.allclose([g["a"][0], g["b"][0]], [0.6, 0.8])
    g = {"a": np.array([0.3])}
    TR.clip_global_norm(g, 1.0)
    assert g["a"][0] == 0.3


# --- plateau schedule -----------------------------------------------------------------


def run_schedule(losses, window=5, cooldown=5):
    sched = TR.PlateauSchedule(window=window, cooldown=cooldown)
    s = TR.RMSPropState(learning_rate=1.0)
    lrs = []
    for n in range(1, len(losses) + 1):
        lrs.append(TR.plateau_check(losses[:n], sched, s))
    return s, lrs


def test_decreasing_loss_keeps_rate():
    s, _ = run_schedule([10.0 - k for k in range(20)])
    assert s.learning_rate == 1.0 and s.reductions == 0


def test_flat_window_decays_once():
    s, lrs = run_schedule([3.0] * 5)
    assert s.reductions == 1 and s.learning_rate == pytest.approx(0.3)
    assert lrs[:4] == [1.0] * 4


def test_three_flat_windows_decay_exactly_twice():
    s, _ = run_schedule([3.0] * 15)
    assert s.reductions == 2 and s.learning_rate == pytest.approx(0.09)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=60))
def test_rate_never_increases(losses):
    _, lrs = run_schedule(losses, window=3, cooldown=2)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        TR.PlateauSchedule(factor=1.0)
    with pytest.raises(ValueError):
        TR.PlateauSchedule(window=0)
    with pytest.raises(ValueError):
        TR.TrainConfig(steps=-1)
    with pytest.raises(ValueError):
        TR.TrainConfig(learning_rate=0)


# --- training loop -----------------------------------------------------------------


def test_zero_steps_writes_initial_checkpoint(tmp_path):
    res = TR.train_loop(TINY, TINY_DATA, TR.TrainConfig(steps=0, seed=3), tmp_path)
    assert res.metrics == []
    cfg, params = M.load_checkpoint(tmp_path / "checkpoint.vpnk")
    init = M.init_params(TINY, 3).named()
    assert all(np.array_equal(init[k].data, v.data) for k, v in params.named().items())
    assert (tmp_path / "metrics.jsonl").read_text() == ""


def test_same_seed_is_bit_identical(tmp_path):
    tc = TR.TrainConfig(steps=3, batch_size=2, seed=5, checkpoint_every=2)
    TR.train_loop(TINY, TINY_DATA, tc, tmp_path / "a")
    TR.train_loop(TINY, TINY_DATA, tc, tmp_path / "b")
    for name in ("metrics.jsonl", "checkpoint.vpnk", "ckpt_000002.vpnk"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    recs = TR.read_metrics(tmp_path / "a" / "metrics.jsonl")
    assert [r["step"] for r in recs] == [1, 2, 3]
    assert set(recs[0]) == {"step", "loss_nats_per_frame", "lr"}
    timing = [json.loads(x) for x in (tmp_path / "a" / "timing.jsonl").read_text().splitlines()]
    assert [t["step"] for t in timing] == [1, 2, 3]


def test_masked_weights_never_move():
    from vpnet.blocks import cached_mask
    cfg = M.ModelConfig(frame_size=4, color_channels=3, encoder_blocks=1, decoder_blocks=1,
                        block_width=6, lstm_channels=4, top_channels=6, context_frames=1, head="softmax256",
                        num_frames=2)
    params = M.init_params(cfg, 0)
    before = {k: v.data.copy() for k, v in params.named().items()}
    draw = lambda b: (np.random.default_rng(1).integers(0, 256, (b, 2, 4, 4, 3)), None)
    TR.fit_params(cfg, params, draw, TR.TrainConfig(steps=3, batch_size=2))
    after = params.named()
    first = cached_mask("A", 3, 3, 3, 3, 6).mask
    mu = cached_mask("B", 3, 3, 3, 3, 3).mask
    masked = {"first_W": first}
    masked.update({f"dec_blocks.0.mu_{ab}.W{k}": mu for ab in "ab" for k in range(1, 5)})
    for name, m in masked.items():
        assert (m == 0).any()
        assert np.array_equal(after[name].data[m == 0], before[name][m == 0]), name
        assert not np.array_equal(after[name].data, before[name]), name


def test_training_reduces_loss():
    res = TR.train_loop(TINY, TINY_DATA, TR.TrainConfig(steps=30, batch_size=2, seed=1))
    first = np.mean([r["loss_nats_per_frame"] for r in res.metrics[:5]])
    last = np.mean([r["loss_nats_per_frame"] for r in res.metrics[-5:]])
    assert last < first


def test_data_shape_mismatch():
    with pytest.raises(TR.ConfigMismatch):
        TR.train_loop(TINY, D.MOVING_PRESETS["desk"], TR.TrainConfig(steps=1))
    with pytest.raises(TR.ConfigMismatch):
        TR.batch_source(M.preset("desk-pushing"), D.PUSH_PRESETS["paper"], 0)
    with pytest.raises(TypeError):
        TR.batch_source(TINY, object(), 0)


def test_zero_actions_only_clear_actions():
    cfg = M.preset("desk-pushing")
    draw = TR.batch_source(cfg, D.PUSH_PRESETS["desk"], np.random.default_rng(0), True)
    _, cond = draw(3)
    assert not cond[..., :5].any() and cond[:, :2, 5:].any()


# --- evaluation --------------------------------------------------------------------


def zero_params(cfg):
    params = M.init_params(cfg)
    for t in params.named().values():
        t.data = np.zeros_like(t.data)
    return params


def test_eval_zero_weights_is_uniform():
    ds = D.make_fixed_test_set(TINY_DATA, 0, 5)
    rep = TR.eval_loop(TINY, zero_params(TINY), ds, batch_size=2)
    assert rep.nats_per_frame == pytest.approx(64 * math.log(2), abs=1e-9)
    assert rep.frames == 5 and rep.lower_bound == 0.0
    assert rep.to_dict()["gap"] == pytest.approx(rep.nats_per_frame)


def test_eval_is_order_independent():
    res = TR.train_loop(TINY, TINY_DATA, TR.TrainConfig(steps=2, batch_size=2))
    ds = D.make_fixed_test_set(TINY_DATA, 0, 6)
    rev = D.Dataset(ds.videos[::-1].copy(), ds.config)
    a = TR.eval_loop(TINY, res.params, ds, batch_size=4).nats_per_frame
    b = TR.eval_loop(TINY, res.params, rev, batch_size=5).nats_per_frame
    assert a == pytest.approx(b, rel=1e-12)


def test_eval_mismatch_and_empty():
    params = M.init_params(TINY)
    with pytest.raises(TR.ConfigMismatch):
        TR.eval_loop(TINY, params, D.make_fixed_test_set(D.MOVING_PRESETS["desk"], 0, 1))
    with pytest.raises(TR.ConfigMismatch):
        TR.eval_loop(TINY, params, D.make_fixed_test_set(D.PushConfig(canvas=8, frames=3), 0, 1,
                                                         kind="pushing"))
    with pytest.raises(ValueError, match="empty"):
        TR.eval_loop(TINY, params, D.make_fixed_test_set(TINY_DATA, 0, 0))


def test_eval_reports_gray_bound():
    bank = D.SpriteBank(np.full((2, 3, 3), 0.5))
    ds = D.make_fixed_test_set(TINY_DATA, 0, 2, bank=bank)
    rep = TR.eval_loop(TINY, M.init_params(TINY), ds)
    z = 128 / 255
    h = -(z * math.log(z) + (1 - z) * math.log(1 - z))
    assert rep.lower_bound == pytest.approx(9 * h, abs=1e-9)


@pytest.mark.slow
def test_deterministic_motion_sanity_run():
    cfg = D.MovingSpriteConfig(num_sprites=1, speed=(1, 1))
    res = TR.train_loop(M.preset("desk"), cfg,
                        TR.TrainConfig(steps=2000, batch_size=1, seed=0))
    final = np.mean([r["loss_nats_per_frame"] for r in res.metrics[-50:]])
    assert final < 0.5 * 256 * math.log(2), final
