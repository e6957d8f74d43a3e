"""
gridcode.py

Analytic grid codes used as ground truth for the evaluation pipeline.

A hexagonal module is the ReLU of three plane waves whose wavevectors are
120 degrees apart and sum to zero; cells in a module share period and
orientation and differ only in their phase. The 1-D construction, a square
lattice and a ring code (a 1-D code laid out along one direction of the plane)
are provided for tests that need a code with known, different structure.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from trajectory import Box, square_arena

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi


def hex_wavevectors(period: float, orientation: float) -> np.ndarray:
    """
    k1 at `orientation`, k2 at orientation + 120 deg, k3 = -k1 - k2.

    |k| = 4 pi / (sqrt(3) period), so neighbouring firing fields are `period` apart.
    """
    magnitude = 4.0 * np.pi / (np.sqrt(3.0) * period)
    angles = orientation + np.array([0.0, 2.0, 4.0]) * np.pi / 3.0
    k = magnitude * np.column_stack([np.cos(angles), np.sin(angles)])
    k[2] = -k[0] - k[1]
    return k


def lattice_vectors(wavevectors: np.ndarray) -> np.ndarray:
    """Rows a1, a2 with k_a . a_b = 2 pi delta_ab for a, b in {1, 2}."""
    return (TWO_PI * np.linalg.inv(wavevectors[:2])).T


@dataclass
class IdealModule:
    """
    One hexagonal module.

    Attributes:
        period: Lattice spacing in meters
        orientation: Angle of k1 in radians
        phases: M x 2 cell phases; the third phase is minus their sum
        r_max: Peak rate
    """

    period: float
    orientation: float
    phases: np.ndarray
    r_max: float = 1.0

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError(f"period must be positive, got {self.period}")
        self.phases = np.atleast_2d(np.asarray(self.phases, dtype=np.float64))

    @property
    def n_cells(self) -> int:
        return self.phases.shape[0]

    @property
    def wavevectors(self) -> np.ndarray:
        return hex_wavevectors(self.period, self.orientation)

    def phase_triples(self) -> np.ndarray:
        """M x 3 phases (phi1, phi2, phi3) with phi1 + phi2 + phi3 = 0."""
        return np.column_stack([self.phases, -self.phases.sum(axis=1)])

    def rates(self, x: np.ndarray) -> np.ndarray:
        return rate_2d_hex(self, x)


@dataclass
class IdealModule1D:
    """The literal 1-D construction: r_i(x) = R_max ReLU(cos(2 pi x / period + phi_i))."""

    period: float
    phases: np.ndarray
    r_max: float = 1.0

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError(f"period must be positive, got {self.period}")
        self.phases = np.asarray(self.phases, dtype=np.float64).reshape(-1)


@dataclass
class SquareModule:
    """Two orthogonal plane waves; a lattice with 90 degree symmetry."""

    period: float
    orientation: float
    phases: np.ndarray
    r_max: float = 1.0

    def __post_init__(self):
        self.phases = np.atleast_2d(np.asarray(self.phases, dtype=np.float64))

    @property
    def wavevectors(self) -> np.ndarray:
        angles = self.orientation + np.array([0.0, np.pi / 2])
        return TWO_PI / self.period * np.column_stack([np.cos(angles), np.sin(angles)])

    def phase_triples(self) -> np.ndarray:
        return np.column_stack([self.phases, np.zeros(self.phases.shape[0])])

    def rates(self, x: np.ndarray) -> np.ndarray:
        arg = np.asarray(x, dtype=np.float64) @ self.wavevectors.T
        total = np.cos(arg[:, None, 0] + self.phases[None, :, 0]) + np.cos(arg[:, None, 1] + self.phases[None, :, 1])
        return self.r_max * np.maximum(total, 0.0) / 2.0


@dataclass
class RingModule:
    """A 1-D periodic code along `orientation`, constant across it."""

    period: float
    orientation: float
    phases: np.ndarray
    r_max: float = 1.0

    def __post_init__(self):
        self.phases = np.asarray(self.phases, dtype=np.float64).reshape(-1)

    def phase_triples(self) -> np.ndarray:
        zeros = np.zeros_like(self.phases)
        return np.column_stack([self.phases, zeros, zeros])

    def rates(self, x: np.ndarray) -> np.ndarray:
        direction = np.array([np.cos(self.orientation), np.sin(self.orientation)])
        u = np.asarray(x, dtype=np.float64) @ direction
        return self.r_max * np.maximum(np.cos(TWO_PI * u[:, None] / self.period + self.phases[None, :]), 0.0)


Module = Union[IdealModule, SquareModule, RingModule]


@dataclass
class IdealCode:
    """A population of modules with pairwise distinct periods."""

    modules: List[Module] = field(default_factory=list)

    def __post_init__(self):
        periods = [m.period for m in self.modules]
        if len(set(periods)) != len(periods):
            raise ValueError(f"module periods must be distinct, got {periods}")

    @property
    def n_units(self) -> int:
        return sum(m.phases.shape[0] for m in self.modules)

    def module_labels(self) -> np.ndarray:
        return np.concatenate([np.full(m.phases.shape[0], i) for i, m in enumerate(self.modules)])

    def rates(self, x: np.ndarray) -> np.ndarray:
        """P x n_units rates for P positions."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.concatenate([m.rates(x) for m in self.modules], axis=1)

    def phase_triples(self) -> np.ndarray:
        return np.concatenate([m.phase_triples() for m in self.modules], axis=0)


# ---------------------------------------------------------------------------
# Rates and phases
# ---------------------------------------------------------------------------

def rate_1d(module: IdealModule1D, x) -> np.ndarray:
    """Rates of every cell at each position; shape x.shape + (M,)."""
    x = np.asarray(x, dtype=np.float64)
    return module.r_max * np.maximum(np.cos(TWO_PI * x[..., None] / module.period + module.phases), 0.0)


def rate_2d_hex(module: IdealModule, x: np.ndarray) -> np.ndarray:
    """
    R_max ReLU(sum_a cos(k_a . x + phi_a)) / 3, peaking at R_max.

    Args:
        module: Hexagonal module
        x: P x 2 positions (a single 2-vector is accepted)

    Returns:
        P x M rates
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    arg = x @ module.wavevectors.T
    phases = module.phase_triples()
    total = np.cos(arg[:, None, :] + phases[None, :, :]).sum(axis=-1)
    return module.r_max * np.maximum(total, 0.0) / 3.0


def phase_of_position(module: IdealModule, x) -> np.ndarray:
    """(k1 . x, k2 . x) mod 2 pi: the position reduced modulo the lattice."""
    x = np.asarray(x, dtype=np.float64)
    return np.mod(x @ module.wavevectors[:2].T, TWO_PI)


def phase_grid(side: int) -> np.ndarray:
    """side^2 phases tiling the phase torus evenly."""
    steps = TWO_PI * np.arange(side) / side
    p0, p1 = np.meshgrid(steps, steps, indexing="ij")
    return np.column_stack([p0.ravel(), p1.ravel()])


def ideal_module(period: float = 0.4, orientation: float = np.deg2rad(7.5), grid: int = 8, r_max: float = 1.0) -> IdealModule:
    return IdealModule(period, orientation, phase_grid(grid), r_max)


def ideal_module_1d(period: float, n_cells: int = 16, r_max: float = 1.0) -> IdealModule1D:
    return IdealModule1D(period, TWO_PI * np.arange(n_cells) / n_cells, r_max)


def square_module(period: float, orientation: float = 0.0, grid: int = 8, r_max: float = 1.0) -> SquareModule:
    return SquareModule(period, orientation, phase_grid(grid), r_max)


def ring_module(period: float, orientation: float = 0.0, n_cells: int = 32, r_max: float = 1.0) -> RingModule:
    return RingModule(period, orientation, TWO_PI * np.arange(n_cells) / n_cells, r_max)


def two_module_code(periods: Sequence[float] = (0.30, 0.45), orientations: Sequence[float] = (np.deg2rad(7.5), np.deg2rad(22.5)), grid: int = 8) -> IdealCode:
    return IdealCode([ideal_module(p, o, grid) for p, o in zip(periods, orientations)])


def default_code() -> IdealCode:
    """The shipped oracle: two modules, 0.30 m at 7.5 degrees and 0.45 m at 22.5 degrees."""
    return two_module_code()


def population_states(code: IdealCode, x: np.ndarray) -> np.ndarray:
    """Rates normalised per position to unit norm, matching the network's state space."""
    rates = code.rates(x)
    norms = np.linalg.norm(rates, axis=1, keepdims=True)
    return rates / np.where(norms > 0, norms, 1.0)


# ---------------------------------------------------------------------------
# Coding diagnostics
# ---------------------------------------------------------------------------

def grid_positions(arena: Union[float, Box], resolution: float) -> np.ndarray:
    """Bin centres of a regular grid over the arena, row-major."""
    box = square_arena(arena) if np.isscalar(arena) else tuple(arena)
    xs = np.arange(box[0] + resolution / 2, box[1], resolution)
    ys = np.arange(box[2] + resolution / 2, box[3], resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def binned_distance_curve(
    states: np.ndarray,
    coords: np.ndarray,
    bin_width: float,
    max_separation: float,
    n_pairs: int = 200_000,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Mean ||g_i - g_j|| against ||x_i - x_j|| from randomly drawn pairs.

    Args:
        states: P x N states
        coords: P x D coordinates (positions, or times as P x 1)
        bin_width: Width of separation bins
        max_separation: Upper edge of the last bin
        n_pairs: Number of random pairs drawn
        rng: Seeded generator

    Returns:
        (bin centres, mean neural distance per bin with NaN for empty bins, pair counts)
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    coords = np.asarray(coords, dtype=np.float64).reshape(states.shape[0], -1)
    i = rng.integers(0, states.shape[0], size=n_pairs)
    j = rng.integers(0, states.shape[0], size=n_pairs)
    spatial = np.linalg.norm(coords[i] - coords[j], axis=1)
    neural = np.linalg.norm(states[i] - states[j], axis=1)
    edges = np.arange(0.0, max_separation + bin_width, bin_width)
    which = np.digitize(spatial, edges) - 1
    keep = (which >= 0) & (which < len(edges) - 1)
    counts = np.bincount(which[keep], minlength=len(edges) - 1)
    sums = np.bincount(which[keep], weights=neural[keep], minlength=len(edges) - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    centres = (edges[:-1] + edges[1:]) / 2
    return centres, means, counts


def displacement_threshold(code: IdealCode, positions: np.ndarray, resolution: float) -> float:
    """Median neural distance between each position and its neighbours `resolution` away along x and y."""
    base = population_states(code, positions)
    distances = []
    for offset in ((resolution, 0.0), (0.0, resolution)):
        moved = population_states(code, positions + np.asarray(offset))
        distances.append(np.linalg.norm(base - moved, axis=1))
    return float(np.median(np.concatenate(distances)))


def mean_distance_at(
    code: IdealCode,
    separation: float,
    arena: Union[float, Box] = 2.0,
    n_samples: int = 20_000,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Mean ||g(x) - g(x + d)|| over random x in the arena and random directions of d, |d| = separation."""
    rng = rng if rng is not None else np.random.default_rng(0)
    box = square_arena(arena) if np.isscalar(arena) else tuple(arena)
    x = np.column_stack([rng.uniform(box[0], box[1], n_samples), rng.uniform(box[2], box[3], n_samples)])
    heading = rng.uniform(0.0, TWO_PI, n_samples)
    moved = x + separation * np.column_stack([np.cos(heading), np.sin(heading)])
    return float(np.mean(np.linalg.norm(population_states(code, x) - population_states(code, moved), axis=1)))


def count_distinguishable(states: np.ndarray, threshold: float) -> int:
    """Greedy packing: keep a state when it is farther than `threshold` from all kept ones."""
    kept: List[np.ndarray] = []
    block = np.empty((0, states.shape[1]))
    for s in states:
        if block.shape[0] and np.min(cdist(s[None, :], block)) <= threshold:
            continue
        kept.append(s)
        block = np.vstack([block, s[None, :]])
    return len(kept)


@dataclass
class CodingReport:
    """Capacity, decorrelation and equinorm diagnostics of a code."""

    threshold: float
    distinguishable: List[int]
    separations: np.ndarray
    mean_distances: np.ndarray
    min_norm: float
    max_norm: float
    plateau: Tuple[float, float] = (float("nan"), float("nan"))

    def to_dict(self) -> dict:
        return {
            "distance_at_min_period": self.plateau[0],
            "distance_at_twice_min_period": self.plateau[1],
            "threshold": self.threshold,
            "distinguishable_by_modules": self.distinguishable,
            "separations": self.separations.tolist(),
            "mean_distances": self.mean_distances.tolist(),
            "min_norm": self.min_norm,
            "max_norm": self.max_norm,
        }


def coding_diagnostics(
    code: IdealCode,
    arena: Union[float, Box] = 2.0,
    resolution: float = 0.05,
    threshold: Optional[float] = None,
    n_pairs: int = 200_000,
    rng: Optional[np.random.Generator] = None,
) -> CodingReport:
    """
    Report on an ideal code over a grid of positions `resolution` apart.

    Args:
        code: Code with at least one module
        arena: Arena side or box
        resolution: Grid spacing and distance-curve bin width, in meters
        threshold: Neural distance separating two coding states; defaults
            to the median distance at a spatial displacement of `resolution`
        n_pairs: Random pairs for the distance curve
        rng: Seeded generator

    Returns:
        CodingReport. `distinguishable[m]` counts states using the first m + 1 modules.
    """
    if not code.modules:
        raise ValueError("coding diagnostics need at least one module")
    positions = grid_positions(arena, resolution)
    if threshold is None:
        threshold = displacement_threshold(code, positions, resolution)

    counts = []
    for m in range(1, len(code.modules) + 1):
        sub = IdealCode(code.modules[:m])
        counts.append(count_distinguishable(population_states(sub, positions), threshold))

    states = population_states(code, positions)
    box = square_arena(arena) if np.isscalar(arena) else tuple(arena)
    extent = min(box[1] - box[0], box[3] - box[2])
    separations, means, _ = binned_distance_curve(states, positions, resolution, extent / 2, n_pairs, rng)
    norms = np.linalg.norm(states, axis=1)
    shortest = min(m.period for m in code.modules)
    plateau = (
        mean_distance_at(code, shortest, arena, rng=rng),
        mean_distance_at(code, 2 * shortest, arena, rng=rng),
    )
    logger.debug("Coding diagnostics: threshold %.4f, counts %s, plateau %s", threshold, counts, plateau)
    return CodingReport(
        float(threshold), counts, separations, means, float(norms.min()), float(norms.max()), plateau
    )
