from __future__ import annotations

import math

import numpy as np
import pytest

from hgtree.autograd import Tensor
from hgtree.errors import InvalidScheduleError, NonFiniteError
from hgtree.optim import OptimizerState, adamw_step, clip_grad_norm, load_checkpoint, lr_schedule, save_checkpoint


def test_first_adam_step_moves_by_lr():
    p = {"w": Tensor(np.array([1.0]))}
    adamw_step(p, {"w": np.array([0.5])}, OptimizerState(lr=0.1))
    # bias-corrected m/sqrt(v) is sign(g) on the first step
    assert np.isclose(p["w"].data[0], 0.9, atol=1e-6)


def test_zero_gradient_no_decay_is_noop():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    adamw_step(p, {"w": np.zeros(2)}, OptimizerState(lr=0.1))
    assert np.array_equal(p["w"].data, [1.0, -2.0])


def test_decoupled_weight_decay():
    p = {"w": Tensor(np.array([2.0]))}
    adamw_step(p, {"w": np.zeros(1)}, OptimizerState(lr=0.1, weight_decay=0.5))
    assert np.isclose(p["w"].data[0], 2.0 * (1 - 0.1 * 0.5))


def test_non_finite_gradient_raises_before_update():
    p = {"w": Tensor(np.array([1.0]))}
    with pytest.raises(NonFiniteError):
        adamw_step(p, {"w": np.array([np.nan])}, OptimizerState())
    assert p["w"].data[0] == 1.0


def test_adam_matches_hand_recurrence():
    rng = np.random.default_rng(0)
    w = rng.normal(size=4)
    p = {"w": Tensor(w.copy())}
    st = OptimizerState(lr=0.01, weight_decay=0.1)
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adamw_step(p, {"w": g.copy()}, st)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w * (1 - 0.01 * 0.1) - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p["w"].data, w, atol=1e-12)


def test_schedule_landmarks():
    assert lr_schedule(0, 10, 110, 1e-3) == 0.0
    assert math.isclose(lr_schedule(5, 10, 110, 1e-3), 5e-4)
    assert math.isclose(lr_schedule(10, 10, 110, 1e-3), 1e-3)
    assert math.isclose(lr_schedule(60, 10, 110, 1e-3), 5e-4)
    assert abs(lr_schedule(110, 10, 110, 1e-3)) < 1e-18
    lrs = [lr_schedule(s, 10, 110, 1e-3) for s in range(10, 111)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_schedule_rejects_long_warmup():
    with pytest.raises(InvalidScheduleError):
        lr_schedule(0, 10, 10, 1e-3)


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == 5.0
    assert np.isclose(np.hypot(g["a"][0], g["b"][0]), 1.0)
    small = {"a": np.array([0.3])}
    clip_grad_norm(small, 1.0)
    assert small["a"][0] == 0.3


def test_checkpoint_round_trip(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3), "i": np.array([1, 2], dtype=np.int32),
              "h": np.ones(3, dtype=np.float16)}
    save_checkpoint(tmp_path / "c.bin", arrays, {"step": 7, "note": "x"})
    back, meta = load_checkpoint(tmp_path / "c.bin")
    assert meta == {"step": 7, "note": "x"}
    for k, a in arrays.items():
        assert back[k].dtype == a.dtype and np.array_equal(back[k], a)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
