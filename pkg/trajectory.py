"""
trajectory.py

Training data for one gradient step: a base velocity sequence, B random
permutations of it and the integrated positions, plus the spatial pair masks
the separation and invariance losses sum over. Also generates smooth,
wall-reflected evaluation trajectories and reads/writes trajectory dumps.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Tuple, Union

import numpy as np
from scipy.signal import lfilter
from scipy.spatial.distance import cdist

from errors import StorageError

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]
Pair = Tuple[Tuple[int, int], Tuple[int, int]]

TRAJECTORY_MAGIC = b"GSTJ"
TRAJECTORY_VERSION = 1
_TRAJECTORY_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class VelocityDistribution:
    """Per-component Uniform(low, high) displacement per time step, in meters."""

    low: float = -0.15
    high: float = 0.15

    @classmethod
    def symmetric(cls, half_range: float) -> "VelocityDistribution":
        return cls(-half_range, half_range)

    def sample(self, rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=shape + (2,))


@dataclass
class TrajectoryBatch:
    """
    The velocity table and per-trajectory index arrays for one batch.

    For permutation batches `base_velocities` is the shared T x 2 sequence and
    every row of `permutations` is a bijection on [T]. For the no-permutation
    ablation the table holds B*T independent velocities and the rows index
    disjoint slices of it (`independent` is True).

    Attributes:
        base_velocities: Velocity table, K x 2
        permutations: B x T integer indices into the table
        positions: B x T x 2 integrated positions
        origin: Shared start position
        independent: True for batches of independent sequences
    """

    base_velocities: np.ndarray
    permutations: np.ndarray
    positions: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))
    independent: bool = False

    @property
    def batch_size(self) -> int:
        return self.permutations.shape[0]

    @property
    def steps(self) -> int:
        return self.permutations.shape[1]

    @property
    def velocities(self) -> np.ndarray:
        """B x T x 2 velocities in the order each trajectory sees them."""
        return self.base_velocities[self.permutations]

    def endpoint_spread(self) -> float:
        """Largest distance between any trajectory's final position and trajectory 0's."""
        if self.steps == 0:
            return 0.0
        final = self.positions[:, -1, :]
        return float(np.max(np.linalg.norm(final - final[0], axis=1)))


def integrate_positions(velocities: np.ndarray, origin=(0.0, 0.0)) -> np.ndarray:
    """
    Cumulative sum of per-step displacements (unit time step).

    Args:
        velocities: ... x T x 2 displacements
        origin: Start position added to every integrated point

    Returns:
        Positions with the same shape as `velocities`
    """
    velocities = np.asarray(velocities, dtype=np.float64)
    return np.asarray(origin, dtype=np.float64) + np.cumsum(velocities, axis=-2)


def sample_batch(
    steps: int,
    batch_size: int,
    rng: np.random.Generator,
    dist: VelocityDistribution = VelocityDistribution(),
    origin=(0.0, 0.0),
) -> TrajectoryBatch:
    """
    Sample one base sequence and B uniformly random permutations of it.

    The identity permutation is not forced into the batch.

    Args:
        steps: Trajectory length T (>= 1)
        batch_size: Number of permuted trajectories B (>= 1)
        rng: Seeded numpy generator
        dist: Velocity distribution
        origin: Shared start position

    Returns:
        TrajectoryBatch whose trajectories all end at the same point
    """
    if steps < 1 or batch_size < 1:
        raise ValueError(f"need steps >= 1 and batch_size >= 1, got {steps}, {batch_size}")
    base = dist.sample(rng, (steps,))
    permutations = rng.permuted(np.tile(np.arange(steps), (batch_size, 1)), axis=1)
    origin = np.asarray(origin, dtype=np.float64)
    positions = integrate_positions(base[permutations], origin)
    return TrajectoryBatch(base, permutations, positions, origin)


def sample_independent_batch(
    steps: int,
    batch_size: int,
    rng: np.random.Generator,
    dist: VelocityDistribution = VelocityDistribution(),
    origin=(0.0, 0.0),
) -> TrajectoryBatch:
    """B independently drawn velocity sequences (the no-permutation ablation)."""
    if steps < 1 or batch_size < 1:
        raise ValueError(f"need steps >= 1 and batch_size >= 1, got {steps}, {batch_size}")
    table = dist.sample(rng, (batch_size * steps,))
    index = np.arange(batch_size * steps).reshape(batch_size, steps)
    origin = np.asarray(origin, dtype=np.float64)
    positions = integrate_positions(table[index], origin)
    return TrajectoryBatch(table, index, positions, origin, independent=True)


# ---------------------------------------------------------------------------
# Pair masks
# ---------------------------------------------------------------------------

def _block_distances(points: np.ndarray, start: int, stop: int) -> np.ndarray:
    return cdist(points[start:stop], points)


@dataclass
class PairMask:
    """
    Which (b, t), (b', t') pairs are spatially far (> sigma_x) or near (< sigma_x).

    Points are the flattened B*T positions, index i = b*T + t. Every pair is
    stored once, as i < j. Near pairs and the rare pairs at exactly sigma_x are
    kept explicitly; far pairs are everything else and are produced block by
    block, since there are O((BT)^2) of them.
    """

    points: np.ndarray
    steps: int
    sigma_x: float
    near_i: np.ndarray
    near_j: np.ndarray
    boundary_i: np.ndarray
    boundary_j: np.ndarray

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def total_pairs(self) -> int:
        return self.n_points * (self.n_points - 1) // 2

    @property
    def near_count(self) -> int:
        return int(self.near_i.size)

    @property
    def far_count(self) -> int:
        return self.total_pairs - self.near_count - int(self.boundary_i.size)

    def far_block(self, start: int, stop: int) -> np.ndarray:
        """
        Boolean (stop - start) x n_points matrix; entry [r, j] is True when
        the pair (start + r, j) is far and start + r < j.
        """
        dist = _block_distances(self.points, start, stop)
        rows = np.arange(start, stop)[:, None]
        cols = np.arange(self.n_points)[None, :]
        return (dist > self.sigma_x) & (cols > rows)

    def index_of(self, i: int) -> Tuple[int, int]:
        """(b, t) for a flattened point index."""
        return divmod(int(i), self.steps)

    def near_pairs(self) -> List[Pair]:
        return [(self.index_of(i), self.index_of(j)) for i, j in zip(self.near_i, self.near_j)]

    def far_pairs(self, block: int = 512) -> Iterator[Pair]:
        for start in range(0, self.n_points, block):
            stop = min(start + block, self.n_points)
            rows, cols = np.nonzero(self.far_block(start, stop))
            for r, c in zip(rows, cols):
                yield self.index_of(start + r), self.index_of(c)


def build_pair_masks(batch: TrajectoryBatch, sigma_x: float, block: int = 512) -> PairMask:
    """
    Classify every unordered pair of batch points, within and across trajectories.

    Pairs at exactly sigma_x belong to neither mask.
    """
    if sigma_x <= 0:
        raise ValueError(f"sigma_x must be positive, got {sigma_x}")
    points = batch.positions.reshape(-1, 2)
    n = points.shape[0]
    near_i: List[np.ndarray] = []
    near_j: List[np.ndarray] = []
    edge_i: List[np.ndarray] = []
    edge_j: List[np.ndarray] = []
    for start in range(0, n, block):
        stop = min(start + block, n)
        dist = _block_distances(points, start, stop)
        upper = np.arange(n)[None, :] > np.arange(start, stop)[:, None]
        rows, cols = np.nonzero((dist < sigma_x) & upper)
        near_i.append(rows + start)
        near_j.append(cols)
        rows, cols = np.nonzero((dist == sigma_x) & upper)
        edge_i.append(rows + start)
        edge_j.append(cols)
    return PairMask(
        points=points,
        steps=batch.steps,
        sigma_x=float(sigma_x),
        near_i=np.concatenate(near_i).astype(np.intp),
        near_j=np.concatenate(near_j).astype(np.intp),
        boundary_i=np.concatenate(edge_i).astype(np.intp),
        boundary_j=np.concatenate(edge_j).astype(np.intp),
    )


# ---------------------------------------------------------------------------
# Evaluation trajectories
# ---------------------------------------------------------------------------

@dataclass
class EvalTrajectory:
    """Positions and realised per-step displacements of a confined walk."""

    positions: np.ndarray
    velocities: np.ndarray
    start: np.ndarray
    arena: Box


def square_arena(side: float) -> Box:
    """Box of the given side length centred on the origin."""
    if side <= 0:
        raise ValueError(f"arena side must be positive, got {side}")
    half = side / 2.0
    return (-half, half, -half, half)


def _fold(u: np.ndarray, low: float, high: float) -> np.ndarray:
    """Map an unconstrained coordinate into [low, high] by specular reflection."""
    width = high - low
    y = np.mod(u - low, 2 * width)
    return low + width - np.abs(y - width)


def sample_eval_trajectory(
    arena: Union[float, Box],
    smoothness: float,
    steps: int,
    rng: np.random.Generator,
    speed: float = 0.03,
) -> EvalTrajectory:
    """
    A velocity random walk with wall reflection.

    Velocities follow v_t = s v_{t-1} + sqrt(1 - s^2) xi_t with xi_t Gaussian
    of per-axis standard deviation `speed`; s = 0 gives i.i.d. headings.
    The unconstrained path is folded into the box, which is exact specular
    reflection, and the returned velocities are the realised displacements.

    Args:
        arena: Side length (centred square) or (x0, x1, y0, y1) box
        smoothness: Velocity autocorrelation s in [0, 1)
        steps: Number of steps
        rng: Seeded numpy generator
        speed: Per-axis velocity scale in meters per step

    Returns:
        EvalTrajectory with every position inside the box
    """
    box = square_arena(arena) if np.isscalar(arena) else tuple(float(v) for v in arena)
    if box[1] <= box[0] or box[3] <= box[2]:
        raise ValueError(f"invalid arena box {box}")
    if not 0.0 <= smoothness < 1.0:
        raise ValueError(f"smoothness must lie in [0, 1), got {smoothness}")

    start = np.array([rng.uniform(box[0], box[1]), rng.uniform(box[2], box[3])])
    noise = rng.normal(0.0, speed, size=(steps, 2))
    raw = lfilter([np.sqrt(1.0 - smoothness ** 2)], [1.0, -smoothness], noise, axis=0)
    unfolded = start + np.cumsum(raw, axis=0)
    positions = np.column_stack([
        _fold(unfolded[:, 0], box[0], box[1]),
        _fold(unfolded[:, 1], box[2], box[3]),
    ])
    velocities = np.diff(positions, axis=0, prepend=start[None, :])
    return EvalTrajectory(positions, velocities, start, box)


def occupancy_fraction(positions: np.ndarray, arena: Box, bin_size: float) -> float:
    """Fraction of spatial bins visited at least once."""
    nx = int(round((arena[1] - arena[0]) / bin_size))
    ny = int(round((arena[3] - arena[2]) / bin_size))
    counts, _, _ = np.histogram2d(
        positions[:, 0], positions[:, 1], bins=(nx, ny), range=((arena[0], arena[1]), (arena[2], arena[3]))
    )
    return float(np.mean(counts > 0))


# ---------------------------------------------------------------------------
# Trajectory dump
# ---------------------------------------------------------------------------

def write_trajectory_dump(path: Union[str, Path], batch: TrajectoryBatch) -> None:
    """
    Write velocities then positions (both B x T x 2, little-endian f64) after
    the header {magic "GSTJ", version u32, B u32, T u32}.
    """
    try:
        with open(path, "wb") as f:
            f.write(_TRAJECTORY_HEADER.pack(TRAJECTORY_MAGIC, TRAJECTORY_VERSION, batch.batch_size, batch.steps))
            f.write(np.ascontiguousarray(batch.velocities, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(batch.positions, dtype="<f8").tobytes())
    except OSError as e:
        raise StorageError(f"cannot write trajectory dump {path}: {e}") from e


def read_trajectory_dump(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """Read a dump written by write_trajectory_dump; returns (velocities, positions)."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read trajectory dump {path}: {e}") from e
    if len(data) < _TRAJECTORY_HEADER.size:
        raise StorageError(f"{path}: truncated header")
    magic, version, b, t = _TRAJECTORY_HEADER.unpack_from(data)
    if magic != TRAJECTORY_MAGIC:
        raise StorageError(f"{path}: bad magic {magic!r}")
    if version != TRAJECTORY_VERSION:
        raise StorageError(f"{path}: unsupported version {version}")
    count = b * t * 2
    body = np.frombuffer(data, dtype="<f8", offset=_TRAJECTORY_HEADER.size)
    if body.size != 2 * count:
        raise StorageError(f"{path}: expected {2 * count} values, found {body.size}")
    return body[:count].reshape(b, t, 2).copy(), body[count:].reshape(b, t, 2).copy()
