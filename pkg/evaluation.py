"""
evaluation.py

The analysis pipeline run on a trained network or on an ideal code.

An activation source turns an evaluation walk into unit activations; the
pipeline bins them into ratemaps, summarises every unit spectrally, groups
units into modules, checks each module's manifold for toroidal structure and
measures how neural distance grows with spatial and temporal separation.
For networks it also measures how far the learned updates are from commuting.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from config import EvalConfig
from errors import AnalysisError, StorageError
from gridcode import IdealCode, binned_distance_curve
from model import ModelParams, rollout_chunks, step_numpy
from modules import ModuleReport, cluster_modules, orientation_distance
from ratemaps import Ratemap, bin_size_for, compute_ratemaps, steps_for, write_montage, write_pgm, write_ratemap
from spatial import autocorrelogram
from spectral import UnitSpectralSummary, fourier_summary, mean_power_spectrum
from topology import TorusReport, torus_analysis
from trajectory import EvalTrajectory, TrajectoryBatch, sample_eval_trajectory, square_arena

logger = logging.getLogger(__name__)

KEEP_SAMPLES = 20_000


class ActivationSource(ABC):
    """Abstract base class for anything that produces unit activations along a walk."""

    @property
    @abstractmethod
    def n_units(self) -> int:
        pass

    @abstractmethod
    def activations(self, trajectory: EvalTrajectory, chunk: int = 4096) -> Iterator[np.ndarray]:
        """
        Activations along a trajectory.

        Args:
            trajectory: Evaluation walk
            chunk: Rows per yielded block

        Returns:
            Iterator of consecutive (rows x n_units) blocks covering every step
        """
        pass


class ModelSource(ActivationSource):
    """Network states, path-integrated from g0 at the walk's start."""

    def __init__(self, params: ModelParams):
        self.params = params

    @property
    def n_units(self) -> int:
        return self.params.n_units

    def activations(self, trajectory: EvalTrajectory, chunk: int = 4096) -> Iterator[np.ndarray]:
        return rollout_chunks(self.params, trajectory.velocities, chunk=chunk)


class OracleSource(ActivationSource):
    """Rates of an ideal code read off at the walk's positions."""

    def __init__(self, code: IdealCode):
        self.code = code

    @property
    def n_units(self) -> int:
        return self.code.n_units

    def activations(self, trajectory: EvalTrajectory, chunk: int = 4096) -> Iterator[np.ndarray]:
        for start in range(0, trajectory.positions.shape[0], chunk):
            yield self.code.rates(trajectory.positions[start:start + chunk])


class _SampleKeeper:
    """Keeps every `stride`-th activation row and its position while chunks stream past."""

    def __init__(self, total: int, keep: int = KEEP_SAMPLES):
        self.stride = max(1, total // keep)
        self.rows: List[np.ndarray] = []
        self.index: List[np.ndarray] = []
        self.offset = 0

    def wrap(self, chunks: Iterator[np.ndarray]) -> Iterator[np.ndarray]:
        for chunk in chunks:
            first = (-self.offset) % self.stride
            picked = np.arange(first, chunk.shape[0], self.stride)
            self.rows.append(chunk[picked])
            self.index.append(picked + self.offset)
            self.offset += chunk.shape[0]
            yield chunk

    @property
    def states(self) -> np.ndarray:
        return np.concatenate(self.rows) if self.rows else np.zeros((0, 0))

    @property
    def steps(self) -> np.ndarray:
        return np.concatenate(self.index) if self.index else np.zeros(0, dtype=int)


# ---------------------------------------------------------------------------
# Distance curves
# ---------------------------------------------------------------------------

@dataclass
class DistanceCurves:
    """Mean neural distance against spatial separation and time lag."""

    separations: np.ndarray
    spatial: np.ndarray
    lags: np.ndarray
    temporal: np.ndarray
    batch_distances: Optional[np.ndarray] = None
    batch_cdf: Optional[np.ndarray] = None

    def to_dict(self) -> Dict:
        out = {
            "separations": self.separations.tolist(),
            "spatial": self.spatial.tolist(),
            "lags": self.lags.tolist(),
            "temporal": self.temporal.tolist(),
        }
        if self.batch_distances is not None:
            out["batch_distances"] = self.batch_distances.tolist()
            out["batch_cdf"] = self.batch_cdf.tolist()
        return out


def batch_distance_cdf(batch: TrajectoryBatch, points: int = 101) -> Dict[str, np.ndarray]:
    """Empirical CDF of pairwise spatial distances among all points of a training batch."""
    distances = np.sort(pdist(batch.positions.reshape(-1, 2)))
    quantiles = np.linspace(0.0, 1.0, points)
    return {"distances": np.quantile(distances, quantiles), "cdf": quantiles}


def distance_curves(
    states: np.ndarray,
    positions: np.ndarray,
    bin_width: float = 0.02,
    max_separation: float = 1.0,
    max_lag: int = 200,
    n_pairs: int = 200_000,
    rng: Optional[np.random.Generator] = None,
    batch: Optional[TrajectoryBatch] = None,
    steps: Optional[np.ndarray] = None,
) -> DistanceCurves:
    """
    Binned neural distance ||g - g'|| against ||x - x'|| and against |t - t'|.

    Args:
        states: P x N states (consecutive in time unless `steps` says otherwise)
        positions: P x 2 positions
        bin_width: Spatial bin width in meters
        max_separation: Largest spatial separation reported
        max_lag: Largest time lag reported, in steps of the sampled sequence
        n_pairs: Random pairs for the spatial curve
        rng: Seeded generator
        batch: Training batch whose pairwise-distance CDF is added
        steps: Original step index of each row, for time lags

    Returns:
        DistanceCurves
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    states = np.asarray(states, dtype=np.float64)
    separations, spatial, _ = binned_distance_curve(states, positions, bin_width, max_separation, n_pairs, rng)

    steps = np.arange(states.shape[0]) if steps is None else np.asarray(steps)
    stride = int(steps[1] - steps[0]) if steps.size > 1 else 1
    lag_count = min(max_lag, states.shape[0] - 1)
    lags = np.arange(1, lag_count + 1)
    temporal = np.array([
        float(np.mean(np.linalg.norm(states[lag:] - states[:-lag], axis=1))) for lag in lags
    ])
    curves = DistanceCurves(separations, spatial, lags * stride, temporal)
    if batch is not None:
        cdf = batch_distance_cdf(batch)
        curves.batch_distances, curves.batch_cdf = cdf["distances"], cdf["cdf"]
    return curves


# ---------------------------------------------------------------------------
# Commutation
# ---------------------------------------------------------------------------

@dataclass
class CommutationReport:
    mean: float
    max: float
    residuals: np.ndarray = field(repr=False)

    def to_dict(self) -> Dict:
        return {"mean": self.mean, "max": self.max, "pairs": int(self.residuals.size)}


def commutation_residual(params: ModelParams, g: np.ndarray, vi, vj) -> np.ndarray:
    """||f(f(g, vi), vj) - f(f(g, vj), vi)|| for each state row of g."""
    forward = step_numpy(params, step_numpy(params, g, vi), vj)
    backward = step_numpy(params, step_numpy(params, g, vj), vi)
    return np.linalg.norm(forward - backward, axis=-1)


def commutation_report(
    params: ModelParams,
    velocity_pairs: np.ndarray,
    states: Optional[np.ndarray] = None,
) -> CommutationReport:
    """
    One-step commutation residual over velocity pairs and states.

    Args:
        params: Model parameters
        velocity_pairs: K x 2 x 2 array of (v_i, v_j)
        states: S x N states to start from (g0 alone when omitted)
    """
    g = np.atleast_2d(params.g0.value if states is None else states)
    velocity_pairs = np.asarray(velocity_pairs, dtype=np.float64).reshape(-1, 2, 2)
    residuals = np.concatenate([commutation_residual(params, g, vi, vj) for vi, vj in velocity_pairs])
    return CommutationReport(float(np.mean(residuals)), float(np.max(residuals)), residuals)


def sample_velocity_pairs(count: int, rng: np.random.Generator, half_range: float = 0.15) -> np.ndarray:
    return rng.uniform(-half_range, half_range, size=(count, 2, 2))


# ---------------------------------------------------------------------------
# Trajectory statistics
# ---------------------------------------------------------------------------

def trajectory_statistics(velocities: np.ndarray, bins: int = 24) -> Dict[str, Dict[str, list]]:
    """Histograms of step speed and heading."""
    v = np.asarray(velocities).reshape(-1, 2)
    speed = np.linalg.norm(v, axis=1)
    heading = np.arctan2(v[:, 1], v[:, 0])
    speed_counts, speed_edges = np.histogram(speed, bins=bins)
    heading_counts, heading_edges = np.histogram(heading, bins=bins, range=(-np.pi, np.pi))
    return {
        "speed": {"counts": speed_counts.tolist(), "edges": speed_edges.tolist()},
        "heading": {"counts": heading_counts.tolist(), "edges": heading_edges.tolist()},
    }


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass
class ArenaReport:
    """Everything measured in one arena."""

    arena: float
    bin_size: float
    steps: int
    ratemaps: List[Ratemap] = field(repr=False)
    summaries: List[UnitSpectralSummary]
    modules: Optional[ModuleReport]
    torus: Dict[int, TorusReport]
    curves: Optional[DistanceCurves]
    trajectory_stats: Dict
    errors: List[str] = field(default_factory=list)

    def periods(self) -> np.ndarray:
        return np.array([s.period for s in self.summaries if s.classified])

    def to_dict(self) -> Dict:
        return {
            "arena": self.arena,
            "bin_size": self.bin_size,
            "steps": self.steps,
            "units": [s.to_dict() for s in self.summaries],
            "modules": self.modules.to_dict() if self.modules else None,
            "torus": {str(k): v.to_dict() for k, v in self.torus.items()},
            "distance_curves": self.curves.to_dict() if self.curves else None,
            "trajectory": self.trajectory_stats,
            "errors": self.errors,
        }


def run_pipeline(
    source: ActivationSource,
    arena: float,
    config: Optional[EvalConfig] = None,
    rng: Optional[np.random.Generator] = None,
    out_dir: Optional[Path] = None,
    steps: Optional[int] = None,
    bin_size: Optional[float] = None,
) -> ArenaReport:
    """
    Walk, bin, summarise, cluster and embed for one square arena.

    Args:
        source: Network or ideal code
        arena: Arena side in meters
        config: Evaluation settings (bin size and walk length given for 2 m)
        rng: Seeded generator
        out_dir: When given, ratemap files and images are written here
        steps: Walk length override
        bin_size: Bin size override

    Returns:
        ArenaReport; stages that cannot run record their error instead of raising
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    config = config or EvalConfig()
    bin_size = bin_size or bin_size_for(arena, config.eval_bin_size)
    steps = steps or steps_for(arena, config.eval_steps)
    box = square_arena(arena)
    trajectory = sample_eval_trajectory(box, config.eval_smoothness, steps, rng, config.eval_speed)
    logger.info("Arena %.1f m: %d steps, %.3f m bins", arena, steps, bin_size)

    keeper = _SampleKeeper(steps)
    ratemaps = compute_ratemaps(
        keeper.wrap(source.activations(trajectory)), trajectory.positions, box, bin_size, config.min_occupancy
    )
    summaries = [fourier_summary(r) for r in ratemaps]
    errors: List[str] = []

    modules = None
    try:
        modules = cluster_modules(summaries)
    except AnalysisError as e:
        errors.append(f"modules: {e}")

    kept = keeper.states
    kept_steps = keeper.steps
    torus: Dict[int, TorusReport] = {}
    if modules is not None:
        for module in modules.modules:
            phases = np.array([summaries[u].phases for u in module.units])
            try:
                torus[module.module] = torus_analysis(kept[:, module.units], phases, rng)
            except AnalysisError as e:
                errors.append(f"torus {module.module}: {e}")

    curves = distance_curves(
        kept, trajectory.positions[kept_steps], bin_width=bin_size, max_separation=arena / 2, rng=rng, steps=kept_steps
    )
    report = ArenaReport(
        arena=arena,
        bin_size=bin_size,
        steps=steps,
        ratemaps=ratemaps,
        summaries=summaries,
        modules=modules,
        torus=torus,
        curves=curves,
        trajectory_stats=trajectory_statistics(trajectory.velocities),
        errors=errors,
    )
    if out_dir is not None:
        write_arena_outputs(report, Path(out_dir))
    return report


def write_arena_outputs(report: ArenaReport, out_dir: Path) -> None:
    """GSRM files, ratemap and autocorrelogram images, and the montage."""
    maps_dir = out_dir / "ratemaps"
    images_dir = out_dir / "images"
    try:
        maps_dir.mkdir(parents=True, exist_ok=True)
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"cannot create output directory {out_dir}: {e}") from e
    for ratemap in report.ratemaps:
        write_ratemap(maps_dir / f"unit_{ratemap.unit:03d}.gsrm", ratemap)
        write_pgm(images_dir / f"unit_{ratemap.unit:03d}.pgm", ratemap.values)
        if not ratemap.dead:
            try:
                write_pgm(images_dir / f"acorr_{ratemap.unit:03d}.pgm", autocorrelogram(ratemap).values)
            except AnalysisError:
                pass
    write_montage(out_dir / "montage.ppm", report.ratemaps)
    live = [r for r in report.ratemaps if not r.dead]
    if live:
        try:
            write_pgm(out_dir / "mean_power.pgm", np.log1p(mean_power_spectrum(live).power))
        except AnalysisError:
            pass


# ---------------------------------------------------------------------------
# Oracle comparison
# ---------------------------------------------------------------------------

def compare_to_oracle(report: ArenaReport, code: IdealCode) -> Dict:
    """
    Recovered versus planted parameters for every unit of an ideal code.

    Returns:
        Worst relative period error, worst orientation error (degrees), worst
        phase error (rad), minimum grid score, module count, misassignments
        and whether every module's phases passed the uniformity test
    """
    planted_labels = code.module_labels()
    planted_phases = code.phase_triples()
    period_err, orient_err, phase_err, scores = [], [], [], []
    for summary in report.summaries:
        module = code.modules[planted_labels[summary.unit]]
        scores.append(summary.gridness)
        if not summary.classified:
            period_err.append(np.inf)
            orient_err.append(np.inf)
            continue
        period_err.append(abs(summary.period - module.period) / module.period)
        orient_err.append(float(np.rad2deg(orientation_distance(summary.orientation, module.orientation))))
        diff = np.angle(np.exp(1j * (summary.phases - planted_phases[summary.unit])))
        phase_err.append(float(np.max(np.abs(diff))))

    misassigned = len(report.summaries)
    n_modules = 0
    uniform = False
    if report.modules is not None:
        n_modules = report.modules.n_modules
        misassigned = 0
        for module in report.modules.modules:
            planted = planted_labels[module.units]
            majority = np.bincount(planted).argmax()
            misassigned += int(np.sum(planted != majority))
        misassigned += report.modules.n_unclassified
        uniform = all(m.uniformity.uniform for m in report.modules.modules)
    return {
        "max_period_error": float(np.max(period_err)),
        "max_orientation_error_deg": float(np.max(orient_err)),
        "max_phase_error": float(np.max(phase_err)) if phase_err else float("nan"),
        "min_grid_score": float(np.min(scores)),
        "n_modules": n_modules,
        "misassigned": misassigned,
        "phases_uniform": uniform,
        "rings": {str(k): v.n_rings for k, v in report.torus.items()},
    }


def evaluate(
    source: ActivationSource,
    config: EvalConfig,
    seed: int = 0,
    out_dir: Optional[Path] = None,
    arenas: Optional[Sequence[float]] = None,
) -> List[ArenaReport]:
    """run_pipeline for every arena, each with its own seeded generator."""
    reports = []
    for i, arena in enumerate(arenas or config.eval_arenas):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        target = out_dir / f"arena_{arena:g}m" if out_dir is not None else None
        reports.append(run_pipeline(source, arena, config, rng, target))
    return reports


def arena_generalisation(reports: Sequence[ArenaReport]) -> Dict[str, float]:
    """Median classified period per arena."""
    return {
        f"{r.arena:g}": float(np.median(r.periods())) if r.periods().size else float("nan")
        for r in reports
    }


def oracle_ratemaps(code: IdealCode, arena: float = 2.0, bin_size: Optional[float] = None) -> List[Ratemap]:
    """Noise-free ratemaps of an ideal code, read off at the bin centres."""
    box = square_arena(arena)
    bin_size = bin_size or bin_size_for(arena)
    nx = int(round(arena / bin_size))
    centres = box[0] + (np.arange(nx) + 0.5) * bin_size
    gx, gy = np.meshgrid(centres, centres, indexing="ij")
    rates = code.rates(np.column_stack([gx.ravel(), gy.ravel()]))
    occupancy = np.ones((nx, nx))
    return [
        Ratemap(u, box, bin_size, rates[:, u].reshape(nx, nx), occupancy, float(rates[:, u].max()))
        for u in range(code.n_units)
    ]
