"""
trainer.py

The optimisation loop: batches are drawn from a per-step seeded generator,
states are unrolled through the model, the combined loss is back-propagated,
and gradients are accumulated, clipped and applied with AdamW under a
reduce-on-plateau learning rate. Checkpoints carry a resume sidecar so an
interrupted run continues exactly where it stopped.
"""

import logging
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

import autodiff as ad
from checkpoint import read_checkpoint, write_checkpoint
from config import RunConfig
from errors import DegenerateStateError, NonFiniteError, NumericAbort, StorageError
from losses import LossBreakdown, total_loss
from model import TRAINING_EPS, ModelParams, init_params, unroll_batch
from optimizer import AdamW, GradientAccumulator, PlateauScheduler, clip_gradients
from storage import RunDirectory, step_of_checkpoint, write_json
from trajectory import (
    PairMask,
    TrajectoryBatch,
    VelocityDistribution,
    build_pair_masks,
    sample_batch,
    sample_independent_batch,
)

logger = logging.getLogger(__name__)


def batch_rng(seed: int, step: int) -> np.random.Generator:
    """Generator for micro-step `step`; batches never depend on earlier draws."""
    return np.random.default_rng(np.random.SeedSequence([seed, step]))


def make_batch(config: RunConfig, rng: np.random.Generator) -> TrajectoryBatch:
    data = config.data
    dist = VelocityDistribution.symmetric(data.velocity_range)
    if data.permutations:
        return sample_batch(data.trajectory_length, data.batch_size, rng, dist)
    return sample_independent_batch(data.trajectory_length, data.batch_size, rng, dist)


class BatchPrefetcher:
    """
    Produces (step, batch, pair mask) for steps [start, stop) on a worker
    thread, at most two ahead of the consumer.
    """

    _DONE = object()

    def __init__(self, config: RunConfig, start: int, stop: int, maxsize: int = 2):
        self.config = config
        self.start = start
        self.stop = stop
        self._queue: "queue.Queue" = queue.Queue(maxsize=maxsize)
        self._stopped = threading.Event()
        self._thread = threading.Thread(target=self._produce, name="batch-prefetch", daemon=True)

    def _produce(self) -> None:
        try:
            for step in range(self.start, self.stop):
                if self._stopped.is_set():
                    return
                batch = make_batch(self.config, batch_rng(self.config.train.seed, step))
                mask = build_pair_masks(batch, self.config.loss.sigma_x)
                self._put((step, batch, mask))
        except Exception as e:  # handed to the consumer thread
            self._put(e)
            return
        self._put(self._DONE)

    def _put(self, item) -> None:
        while not self._stopped.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def __iter__(self) -> Iterator[Tuple[int, TrajectoryBatch, PairMask]]:
        self._thread.start()
        try:
            while True:
                item = self._queue.get()
                if item is self._DONE:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self.close()

    def close(self) -> None:
        self._stopped.set()


@dataclass
class TrainingResult:
    run_dir: Optional[RunDirectory]
    final_checkpoint: Optional[Path]
    steps: int
    last: Optional[LossBreakdown]
    lr: float


class Trainer:
    """
    One training replica.

    Args:
        config: Resolved run configuration
        run_dir: Where metrics, checkpoints and reports go (None keeps everything in memory)
        params: Starting parameters; freshly initialised from the seed when omitted
    """

    def __init__(self, config: RunConfig, run_dir: Optional[RunDirectory] = None, params: Optional[ModelParams] = None):
        self.config = config
        self.run_dir = run_dir
        train = config.train
        if params is None:
            params = init_params(
                n_units=config.model.n_units,
                hidden=config.model.hidden_units,
                rng=np.random.default_rng(train.seed),
                n_layers=config.model.mlp_layers,
                dtype=train.dtype,
                train_g0=config.model.train_g0,
            )
        self.params = params
        self.tensors = params.trainable()
        self.optimizer = AdamW(self.tensors, lr=train.learning_rate, weight_decay=train.weight_decay)
        self.accumulator = GradientAccumulator([t.shape for t in self.tensors], train.accumulate_batches)
        self.scheduler = PlateauScheduler(
            lr=train.learning_rate,
            factor=train.scheduler_factor,
            patience=train.scheduler_patience,
            threshold=train.scheduler_threshold,
            min_lr=train.min_lr,
        )
        self.pending_losses: List[float] = []
        self.step = 0
        self.last: Optional[LossBreakdown] = None

    @property
    def lr(self) -> float:
        return self.optimizer.lr

    # -- one step -----------------------------------------------------------

    def compute_gradients(self, batch: TrajectoryBatch, mask: Optional[PairMask] = None) -> Tuple[LossBreakdown, List[np.ndarray]]:
        """Forward and backward pass on one batch; nothing is updated."""
        states = unroll_batch(self.params, batch.base_velocities, batch.permutations, eps=TRAINING_EPS)
        breakdown = total_loss(states, batch, self.config.loss, mask)
        leaves = ad.backward(breakdown.total_tensor)
        grads = [np.asarray(leaves.get(t, np.zeros_like(t.value)), dtype=np.float64) for t in self.tensors]
        return breakdown, grads

    def train_step(self, batch: TrajectoryBatch, mask: Optional[PairMask] = None) -> LossBreakdown:
        """
        Accumulate one micro-batch and apply an update every `accumulate_batches` calls.

        Raises:
            NumericAbort: the loss or a gradient is non-finite
        """
        seed_pair = (self.config.train.seed, self.step)
        try:
            breakdown, grads = self.compute_gradients(batch, mask)
        except (NonFiniteError, DegenerateStateError) as e:
            raise NumericAbort(f"step {self.step}: {e}", step=self.step, batch_seed=seed_pair) from e
        if not np.isfinite(breakdown.total) or not all(np.all(np.isfinite(g)) for g in grads):
            raise NumericAbort(f"step {self.step}: non-finite loss or gradient", step=self.step, batch_seed=seed_pair)

        self.accumulator.add(grads)
        self.pending_losses.append(breakdown.total)
        if self.accumulator.ready:
            self.apply_update()
        self.step += 1
        self.last = breakdown
        return breakdown

    def apply_update(self) -> None:
        train = self.config.train
        grads = clip_gradients(self.accumulator.mean(), train.clip_value, train.clip_mode)
        self.optimizer.step(grads)
        self.optimizer.lr = self.scheduler.step(float(np.mean(self.pending_losses)))
        self.accumulator.reset()
        self.pending_losses = []

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"step": np.array(self.step), "acc_count": np.array(self.accumulator.count)}
        state.update(self.optimizer.state_dict())
        state.update(self.scheduler.state_dict())
        for i, s in enumerate(self.accumulator.sums):
            state[f"acc{i}"] = s
        state["pending_losses"] = np.array(self.pending_losses, dtype=np.float64)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.step = int(state["step"])
        self.optimizer.load_state_dict(state)
        self.scheduler.load_state_dict(state)
        self.accumulator.count = int(state["acc_count"])
        for i, s in enumerate(self.accumulator.sums):
            s[...] = state[f"acc{i}"]
        self.pending_losses = [float(v) for v in state["pending_losses"]]

    def save_checkpoint(self) -> Optional[Path]:
        if self.run_dir is None:
            return None
        path = write_checkpoint(self.run_dir.checkpoint_path(self.step), self.params)
        sidecar = RunDirectory.state_path(path)
        try:
            with open(sidecar, "wb") as f:
                np.savez(f, **self.state_dict())
        except OSError as e:
            raise StorageError(f"cannot write resume state {sidecar}: {e}") from e
        logger.info("Checkpoint %s (step %d)", path.name, self.step)
        return path

    @classmethod
    def resume(cls, config: RunConfig, checkpoint: Union[str, Path], run_dir: Optional[RunDirectory] = None) -> "Trainer":
        """Rebuild a trainer from a checkpoint and its resume sidecar."""
        checkpoint = Path(checkpoint)
        params = read_checkpoint(checkpoint, dtype=config.train.dtype, train_g0=config.model.train_g0)
        if params.n_units != config.model.n_units or params.hidden != config.model.hidden_units:
            raise StorageError(
                f"checkpoint shape N={params.n_units}, H={params.hidden} does not match the config"
            )
        trainer = cls(config, run_dir, params)
        sidecar = RunDirectory.state_path(checkpoint)
        try:
            with np.load(sidecar) as state:
                trainer.load_state_dict(dict(state))
        except (OSError, KeyError, ValueError) as e:
            raise StorageError(f"cannot read resume state {sidecar}: {e}") from e
        if trainer.step != step_of_checkpoint(checkpoint):
            raise StorageError(f"resume state step {trainer.step} does not match {checkpoint.name}")
        logger.info("Resumed from %s at step %d", checkpoint.name, trainer.step)
        return trainer

    def write_abort(self, error: NumericAbort) -> None:
        if self.run_dir is None:
            return
        write_json(self.run_dir.abort_path, {
            "step": error.step,
            "batch_seed": list(error.batch_seed) if error.batch_seed else None,
            "message": str(error),
            "last_finite": self.last.as_row() if self.last else None,
        })

    # -- loop ---------------------------------------------------------------

    def run(self, max_steps: Optional[int] = None, prefetch: bool = True) -> TrainingResult:
        """
        Train until `max_steps` micro-batches have been processed.

        A checkpoint is written at the starting step when it is 0, every
        `checkpoint_every` steps, and at the end.
        """
        train = self.config.train
        stop = train.max_steps if max_steps is None else max_steps
        metrics = self.run_dir.metrics if self.run_dir else None
        final = None
        if self.step == 0:
            final = self.save_checkpoint()

        if prefetch:
            source = BatchPrefetcher(self.config, self.step, stop)
        else:
            source = (
                (s, b, build_pair_masks(b, self.config.loss.sigma_x))
                for s in range(self.step, stop)
                for b in [make_batch(self.config, batch_rng(train.seed, s))]
            )

        try:
            for step, batch, mask in source:
                lr = self.lr
                try:
                    breakdown = self.train_step(batch, mask)
                except NumericAbort as e:
                    logger.error("Numeric abort at step %d (batch seed %s)", step, e.batch_seed)
                    self.write_abort(e)
                    raise
                if metrics is not None:
                    metrics.save_row({"step": step, "lr": lr, **breakdown.as_row()})
                if self.step % train.log_every == 0:
                    logger.info(
                        "step %d  total %.5f  sep %.5f  inv %.5f  cap %.5f  coniso %.5f  lr %.3g",
                        step, breakdown.total, breakdown.sep, breakdown.inv, breakdown.cap, breakdown.coniso, self.lr,
                    )
                if self.step % train.checkpoint_every == 0:
                    final = self.save_checkpoint()
        finally:
            if isinstance(source, BatchPrefetcher):
                source.close()

        if self.step > 0 and self.step % train.checkpoint_every != 0:
            final = self.save_checkpoint()
        elif final is None and self.run_dir is not None:
            final = self.run_dir.checkpoint_path(self.step)
        return TrainingResult(self.run_dir, final, self.step, self.last, self.lr)


def run_training(
    config: RunConfig,
    run_dir: Optional[RunDirectory] = None,
    resume: Optional[Union[str, Path]] = None,
    prefetch: bool = True,
) -> TrainingResult:
    """
    Train from scratch or from a checkpoint.

    When resuming, metrics rows at or past the resume step are dropped so the
    log continues without duplicates.
    """
    if resume is not None:
        trainer = Trainer.resume(config, resume, run_dir)
        if run_dir is not None:
            kept = run_dir.metrics.truncate(trainer.step)
            logger.debug("Kept %d metrics rows before step %d", kept, trainer.step)
    else:
        trainer = Trainer(config, run_dir)
    if run_dir is not None:
        config.write(run_dir.config_path)
    return trainer.run(prefetch=prefetch)
