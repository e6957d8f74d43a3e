"""
losses.py

The four self-supervised losses on a batch of recurrent states and their
weighted combination:

    separation   far-apart positions should map to far-apart states
    invariance   nearby positions should map to the same state, whatever the path
    capacity     states should spread out over the sphere (mean state small)
    conformal isometry  ||g_t - g_{t-1}|| / ||v_t|| should be constant for small steps

States are indexed like the pair masks: flattened point i = b * T + t.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np

import autodiff as ad
from autodiff import Tensor
from model import BatchStates
from trajectory import PairMask, TrajectoryBatch, build_pair_masks

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    """
    Length scales and weights of the combined loss.

    raw_sums switches separation and invariance from pair-count averages to
    plain sums over pairs.
    """

    sigma_x: float = 0.05
    sigma_g: float = 0.4
    lambda_sep: float = 1.0
    lambda_inv: float = 0.1
    lambda_cap: float = 0.5
    lambda_coniso: float = 0.1
    raw_sums: bool = False
    pair_tile: int = 1024

    def __post_init__(self):
        if self.sigma_x <= 0 or self.sigma_g <= 0:
            raise ValueError(f"sigma_x and sigma_g must be positive, got {self.sigma_x}, {self.sigma_g}")
        for name in ("lambda_sep", "lambda_inv", "lambda_cap", "lambda_coniso"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")


@dataclass
class LossBreakdown:
    """Per-step loss values and the pair/step counts each term used."""

    sep: float
    inv: float
    cap: float
    coniso: float
    total: float
    far_pairs: int
    near_pairs: int
    qualifying_steps: int
    coniso_starved: bool = False
    total_tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_row(self) -> Dict[str, Union[float, int]]:
        return {
            "sep": self.sep,
            "inv": self.inv,
            "cap": self.cap,
            "coniso": self.coniso,
            "total": self.total,
            "far_pairs": self.far_pairs,
            "near_pairs": self.near_pairs,
            "qualifying_steps": self.qualifying_steps,
        }


def _flatten(states: Tensor) -> Tensor:
    if states.ndim == 2:
        return states
    return ad.reshape(states, (-1, states.shape[-1]))


def _zero(like: Tensor) -> Tensor:
    return ad.constant(0.0, like)


def separation_loss(
    states: Tensor,
    mask: PairMask,
    sigma_g: float,
    normalize: bool = True,
    tile: int = 1024,
) -> Tensor:
    """
    Sum of exp(-||g_i - g_j||^2 / (2 sigma_g^2)) over far pairs.

    Evaluated in row tiles against the upper triangle, so the full pairwise
    matrix is never materialised at once. Averaged over the far-pair count
    when `normalize` is set; no far pairs gives 0.
    """
    flat = _flatten(states)
    count = mask.far_count
    if count == 0:
        return _zero(flat)
    n = flat.shape[0]
    coeff = -1.0 / (2.0 * sigma_g ** 2)
    total = None
    for start in range(0, n, tile):
        stop = min(start + tile, n)
        far = mask.far_block(start, stop)[:, start:]
        if not far.any():
            continue
        rows = ad.take(flat, np.arange(start, stop))
        cols = ad.take(flat, np.arange(start, n))
        kernel = ad.exp(ad.scale(ad.pairwise_sqdist(rows, cols), coeff))
        part = ad.sum(ad.multiply(kernel, ad.constant(far.astype(flat.dtype), flat)))
        total = part if total is None else ad.add(total, part)
    if total is None:
        return _zero(flat)
    return ad.scale(total, 1.0 / count) if normalize else total


def invariance_loss(states: Tensor, mask: PairMask, normalize: bool = True) -> Tensor:
    """Sum (or mean) of ||g_i - g_j||^2 over near pairs."""
    flat = _flatten(states)
    count = mask.near_count
    if count == 0:
        return _zero(flat)
    diff = ad.subtract(ad.take(flat, mask.near_i), ad.take(flat, mask.near_j))
    total = ad.sum(ad.square(diff))
    return ad.scale(total, 1.0 / count) if normalize else total


def capacity_loss(states: Tensor) -> Tensor:
    """-||mean state||^2, in [-1, 0] for unit-norm states."""
    flat = _flatten(states)
    return ad.scale(ad.sum(ad.square(ad.mean(flat, axis=0))), -1.0)


def qualifying_steps(velocities: np.ndarray, sigma_x: float) -> np.ndarray:
    """Boolean B x T mask of steps with 0 < ||v_t|| < sigma_x."""
    speed = np.linalg.norm(np.asarray(velocities), axis=-1)
    return (speed > 0) & (speed < sigma_x)


def conformal_isometry_loss(
    states_with_initial: Tensor,
    velocities: np.ndarray,
    sigma_x: float,
) -> Tuple[Tensor, int]:
    """
    Population variance of ||g_t - g_{t-1}|| / ||v_t|| over qualifying steps.

    Args:
        states_with_initial: B x (T + 1) x N states, g0 first in each row
        velocities: B x T x 2 velocities in trajectory order
        sigma_x: Spatial length scale; only steps with 0 < ||v|| < sigma_x count

    Returns:
        (loss, number of qualifying steps). Fewer than 2 qualifying steps
        gives a zero loss.
    """
    velocities = np.asarray(velocities)
    if states_with_initial.ndim == 2:
        states_with_initial = ad.reshape(states_with_initial, (1,) + states_with_initial.shape)
        velocities = velocities.reshape(1, -1, 2)
    batch, length, n = states_with_initial.shape
    steps = length - 1
    mask = qualifying_steps(velocities, sigma_x)
    count = int(mask.sum())
    if count < 2:
        return _zero(states_with_initial), count

    b_idx, t_idx = np.nonzero(mask)
    current = b_idx * length + t_idx + 1
    previous = current - 1
    flat = ad.reshape(states_with_initial, (batch * length, n))
    diff = ad.subtract(ad.take(flat, current), ad.take(flat, previous))
    speed = np.linalg.norm(velocities.reshape(batch, steps, 2)[b_idx, t_idx], axis=-1)
    ratios = ad.divide(ad.l2norm(diff, axis=1), ad.constant(speed, flat))
    return ad.variance(ratios), count


def total_loss(
    states: BatchStates,
    batch: TrajectoryBatch,
    config: LossConfig,
    mask: Optional[PairMask] = None,
) -> LossBreakdown:
    """
    Weighted combination of the four terms.

    Terms whose weight is zero are still evaluated for reporting but are
    computed without recording a graph.

    Args:
        states: Batch states from model.unroll_batch
        batch: The trajectory batch the states were produced from
        config: Weights and length scales
        mask: Precomputed pair masks for the batch (built when omitted)

    Returns:
        LossBreakdown whose total_tensor is the differentiable total
    """
    if mask is None:
        mask = build_pair_masks(batch, config.sigma_x)
    normalize = not config.raw_sums
    seq = states.states

    def term(weight: float, fn):
        if weight == 0:
            with ad.no_grad():
                return fn()
        return fn()

    sep = term(config.lambda_sep, lambda: separation_loss(seq, mask, config.sigma_g, normalize, config.pair_tile))
    inv = term(config.lambda_inv, lambda: invariance_loss(seq, mask, normalize))
    cap = term(config.lambda_cap, lambda: capacity_loss(seq))
    coniso, count = term(
        config.lambda_coniso,
        lambda: conformal_isometry_loss(states.with_initial(), batch.velocities, config.sigma_x),
    )

    total = _zero(seq)
    for weight, value in (
        (config.lambda_sep, sep),
        (config.lambda_inv, inv),
        (config.lambda_cap, cap),
        (config.lambda_coniso, coniso),
    ):
        if weight != 0:
            total = ad.add(total, ad.scale(value, weight))

    if count < 2:
        logger.debug("Conformal isometry starved: %d qualifying steps", count)
    return LossBreakdown(
        sep=sep.item(),
        inv=inv.item(),
        cap=cap.item(),
        coniso=coniso.item(),
        total=total.item(),
        far_pairs=mask.far_count,
        near_pairs=mask.near_count,
        qualifying_steps=count,
        coniso_starved=count < 2,
        total_tensor=total,
    )
