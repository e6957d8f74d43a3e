from pathlib import Path

import numpy as np
import pytest

from checkpoint import read_checkpoint
from errors import NumericAbort
from storage import RunDirectory, read_json
from trainer import Trainer, batch_rng, make_batch, run_training


def weights(params):
    return [t.value.copy() for t in params.trainable()]


def assert_same_weights(a, b):
    for x, y in zip(weights(a), weights(b)):
        np.testing.assert_array_equal(x, y)


def test_batches_depend_only_on_seed_and_step(tiny_config):
    first = make_batch(tiny_config, batch_rng(0, 5))
    make_batch(tiny_config, batch_rng(0, 4))
    again = make_batch(tiny_config, batch_rng(0, 5))
    np.testing.assert_array_equal(first.base_velocities, again.base_velocities)
    np.testing.assert_array_equal(first.permutations, again.permutations)
    other = make_batch(tiny_config, batch_rng(1, 5))
    assert not np.array_equal(first.base_velocities, other.base_velocities)


def test_independent_batches_when_permutations_disabled(tiny_config):
    batch = make_batch(tiny_config.with_overrides(permutations=False), batch_rng(0, 0))
    assert batch.independent


def test_training_is_deterministic(tiny_config):
    a = Trainer(tiny_config)
    a.run(prefetch=False)
    b = Trainer(tiny_config)
    b.run(prefetch=False)
    assert_same_weights(a.params, b.params)
    assert a.last.total == b.last.total
    assert a.optimizer.step_count == 3


def test_prefetcher_matches_sequential(tiny_config):
    a = Trainer(tiny_config)
    a.run(prefetch=True)
    b = Trainer(tiny_config)
    b.run(prefetch=False)
    assert_same_weights(a.params, b.params)


def test_training_changes_weights(tiny_config):
    trainer = Trainer(tiny_config)
    before = weights(trainer.params)
    result = trainer.run(prefetch=False)
    assert result.steps == 6
    assert any(not np.array_equal(x, y) for x, y in zip(before, weights(trainer.params)))


def test_checkpoints_and_metrics(tiny_config, tmp_path):
    run = RunDirectory.create(seed=0, root=tmp_path)
    result = run_training(tiny_config, run, prefetch=False)
    assert [p.name for p in run.checkpoints()] == ["ckpt_00000000.gsck", "ckpt_00000003.gsck", "ckpt_00000006.gsck"]
    assert result.final_checkpoint == run.checkpoint_path(6)
    assert all(RunDirectory.state_path(p).exists() for p in run.checkpoints())
    rows = run.metrics.load_all()
    assert [r["step"] for r in rows] == list(range(6))
    assert run.config_path.exists()
    restored = read_checkpoint(result.final_checkpoint)
    assert_same_weights(restored, Trainer.resume(tiny_config, result.final_checkpoint).params)


def test_zero_steps_writes_initial_checkpoint(tiny_config, tmp_path):
    run = RunDirectory.create(seed=0, root=tmp_path)
    result = run_training(tiny_config.with_overrides(max_steps=0), run, prefetch=False)
    assert result.steps == 0
    assert result.final_checkpoint == run.checkpoint_path(0)
    assert run.metrics.load_all() == []


def test_accumulated_steps_equal_one_averaged_update(tiny_config):
    from optimizer import clip_gradients

    config = tiny_config.with_overrides(accumulate_batches=2)
    batches = [make_batch(config, batch_rng(0, s)) for s in (0, 1)]

    accumulated = Trainer(config)
    start = weights(accumulated.params)
    first = accumulated.train_step(batches[0])
    for x, y in zip(start, weights(accumulated.params)):
        np.testing.assert_array_equal(x, y)
    assert accumulated.optimizer.step_count == 0
    second = accumulated.train_step(batches[1])
    assert accumulated.optimizer.step_count == 1
    assert accumulated.accumulator.count == 0

    single = Trainer(config.with_overrides(accumulate_batches=1))
    grads = [single.compute_gradients(b)[1] for b in batches]
    averaged = [(a + b) / 2 for a, b in zip(*grads)]
    single.optimizer.step(clip_gradients(averaged, config.train.clip_value, config.train.clip_mode))

    for x, y in zip(weights(accumulated.params), weights(single.params)):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)
    # the scheduler sees one loss per update: the mean over its micro-batches
    assert accumulated.scheduler.best == pytest.approx((first.total + second.total) / 2)


def test_resume_restores_pending_gradients(tiny_config, tmp_path):
    run = RunDirectory.create(seed=0, root=tmp_path)
    trainer = Trainer(tiny_config, run)
    trainer.run(max_steps=3, prefetch=False)
    assert trainer.accumulator.count == 1

    with np.load(RunDirectory.state_path(run.checkpoint_path(3))) as state:
        assert int(state["acc_count"]) == 1
        assert len(state["pending_losses"]) == 1
        assert np.any(state["acc0"] != 0)

    resumed = Trainer.resume(tiny_config, run.checkpoint_path(3))
    assert resumed.accumulator.count == 1
    assert resumed.pending_losses == trainer.pending_losses
    for x, y in zip(resumed.accumulator.sums, trainer.accumulator.sums):
        np.testing.assert_array_equal(x, y)


def test_resume_is_bit_exact(tiny_config, tmp_path):
    straight = RunDirectory.create(seed=0, root=tmp_path, label="straight")
    run_training(tiny_config, straight, prefetch=False)

    split = RunDirectory.create(seed=0, root=tmp_path, label="split")
    run_training(tiny_config.with_overrides(max_steps=3), split, prefetch=False)
    result = run_training(tiny_config, split, resume=split.checkpoint_path(3), prefetch=False)

    assert result.steps == 6
    assert split.checkpoint_path(6).read_bytes() == straight.checkpoint_path(6).read_bytes()
    assert split.metrics.load_all() == straight.metrics.load_all()


def test_resume_rejects_other_shapes(tiny_config, tmp_path):
    from errors import StorageError

    run = RunDirectory.create(seed=0, root=tmp_path)
    run_training(tiny_config.with_overrides(max_steps=0), run, prefetch=False)
    with pytest.raises(StorageError):
        Trainer.resume(tiny_config.with_overrides(n_units=9), run.checkpoint_path(0))


def test_numeric_abort_writes_report(tiny_config, tmp_path):
    trainer = Trainer(tiny_config)
    trainer.params.layers[0][0].value[0, 0] = np.nan
    trainer.run_dir = RunDirectory.create(seed=0, root=tmp_path)
    with pytest.raises(NumericAbort) as info:
        trainer.run(prefetch=False)
    assert info.value.step == 0
    assert info.value.exit_code == 3
    report = read_json(trainer.run_dir.abort_path)
    assert report["step"] == 0
    assert report["batch_seed"] == [0, 0]
    assert report["last_finite"] is None


@pytest.mark.slow
def test_smoke_run_loss_halves(tmp_path):
    from config import RunConfig

    config = RunConfig.from_file(Path(__file__).resolve().parents[1] / "smoke.cfg")
    assert (config.model.n_units, config.data.batch_size, config.data.trajectory_length) == (64, 32, 30)
    run = RunDirectory.create(seed=0, root=tmp_path)
    result = run_training(config, run)
    assert result.steps == config.train.max_steps
    assert not run.abort_path.exists()

    totals = np.array([r["total"] for r in run.metrics.load_all()])
    assert np.isfinite(totals).all()
    start = totals[:100].mean()
    final = totals[-100:].mean()
    assert final <= start - 0.5 * abs(start)


def test_unwritable_config_aborts_with_storage_error(tiny_config, tmp_path):
    from errors import StorageError

    run = RunDirectory.create(seed=0, root=tmp_path)
    run.config_path.mkdir()
    with pytest.raises(StorageError) as info:
        run_training(tiny_config, run, prefetch=False)
    assert info.value.exit_code == 4
