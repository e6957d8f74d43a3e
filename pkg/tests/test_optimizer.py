import numpy as np
import pytest

import autodiff as ad
from optimizer import (
    AdamW,
    GradientAccumulator,
    PlateauScheduler,
    clip_by_norm,
    clip_gradients,
    plateau_scheduler,
)


def test_clip_by_value():
    clipped = clip_gradients([np.array([5.0, -0.05, -3.0])], 0.1)
    np.testing.assert_array_equal(clipped[0], [0.1, -0.05, -0.1])


def test_clip_by_norm_rescales_globally():
    grads = [np.array([3.0]), np.array([4.0])]
    clipped = clip_by_norm(grads, 1.0)
    assert np.sqrt(sum(float(np.sum(g ** 2)) for g in clipped)) == pytest.approx(1.0)
    np.testing.assert_allclose(clipped[0] / clipped[1], 0.75)
    unchanged = clip_by_norm(grads, 10.0)
    np.testing.assert_array_equal(unchanged[1], grads[1])


def test_unknown_clip_mode():
    with pytest.raises(ValueError):
        clip_gradients([np.ones(2)], 0.1, mode="global")


def test_adamw_first_step_moves_by_lr():
    p = ad.parameter([1.0, -2.0])
    opt = AdamW([p], lr=0.1)
    opt.step([np.array([0.5, -0.25])])
    np.testing.assert_allclose(p.value, [0.9, -1.9], atol=1e-6)


def test_adamw_decoupled_weight_decay():
    p = ad.parameter([2.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    opt.step([np.array([1.0])])
    np.testing.assert_allclose(p.value, [2.0 * (1 - 0.05) - 0.1], atol=1e-6)


def test_adamw_state_round_trip():
    p, q = ad.parameter([1.0, 2.0]), ad.parameter([3.0])
    opt = AdamW([p, q], lr=0.01)
    opt.step([np.array([0.1, 0.2]), np.array([0.3])])
    twin = AdamW([ad.parameter(p.value), ad.parameter(q.value)], lr=0.5)
    twin.load_state_dict(opt.state_dict())
    assert twin.step_count == 1 and twin.lr == 0.01
    np.testing.assert_array_equal(twin.m[0], opt.m[0])
    np.testing.assert_array_equal(twin.v[1], opt.v[1])


def test_gradient_accumulator_mean():
    acc = GradientAccumulator([(2,)], every=2)
    acc.add([np.array([1.0, 2.0])])
    assert not acc.ready
    acc.add([np.array([3.0, 4.0])])
    assert acc.ready
    np.testing.assert_array_equal(acc.mean()[0], [2.0, 3.0])
    acc.reset()
    assert acc.count == 0 and not acc.sums[0].any()
    with pytest.raises(ValueError):
        GradientAccumulator([(1,)], every=0)


def test_plateau_halves_after_patience_plus_one_constant_losses():
    scheduler = PlateauScheduler(lr=1.0, factor=0.5, patience=3)
    for _ in range(3):
        assert scheduler.step(1.0) == 1.0
    assert scheduler.step(1.0) == 0.5
    assert scheduler.reductions == 1


def test_plateau_keeps_rate_while_improving():
    assert plateau_scheduler([1.0, 0.9, 0.8, 0.7, 0.6], lr=1.0, patience=1) == 1.0


def test_plateau_threshold_is_relative():
    scheduler = PlateauScheduler(lr=1.0, patience=1, threshold=0.1)
    scheduler.step(10.0)
    assert scheduler.step(9.5) == 0.5
    assert scheduler.best == 10.0


def test_plateau_floor_and_state():
    scheduler = PlateauScheduler(lr=1e-8, patience=1, min_lr=1e-8)
    plateau_scheduler([1.0, 1.0, 1.0], state=scheduler)
    assert scheduler.lr == 1e-8
    assert scheduler.reductions == 0
    twin = PlateauScheduler(lr=1.0)
    twin.load_state_dict(scheduler.state_dict())
    assert (twin.lr, twin.best, twin.bad_steps) == (scheduler.lr, scheduler.best, scheduler.bad_steps)


def test_plateau_rejects_empty_history():
    with pytest.raises(ValueError):
        plateau_scheduler([], lr=1.0)
