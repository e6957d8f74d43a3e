"""
modules.py

Grouping classified units into grid modules and testing that phases within
a module cover the phase torus evenly.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from sklearn.cluster import DBSCAN

from errors import AnalysisError
from spectral import UnitSpectralSummary

logger = logging.getLogger(__name__)

PERIOD_TOLERANCE = 0.10
ORIENTATION_TOLERANCE = np.deg2rad(5.0)
SIXTY = np.pi / 3

DEAD = -2
UNCLASSIFIED = -1


def orientation_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angular distance between orientations taken modulo 60 degrees."""
    d = np.mod(np.asarray(a) - np.asarray(b), SIXTY)
    return np.minimum(d, SIXTY - d)


def module_distances(periods: np.ndarray, orientations: np.ndarray) -> np.ndarray:
    """
    Pairwise distance in units of the clustering tolerances: the larger of
    |log period ratio| / log(1 + 10%) and orientation difference / 5 degrees.
    """
    log_p = np.log(periods)
    dp = np.abs(log_p[:, None] - log_p[None, :]) / np.log1p(PERIOD_TOLERANCE)
    do = orientation_distance(orientations[:, None], orientations[None, :]) / ORIENTATION_TOLERANCE
    return np.maximum(dp, do)


def circular_mean_60(angles: np.ndarray) -> float:
    """Mean orientation respecting the 60 degree symmetry, in [0, 60) degrees as radians."""
    z = np.mean(np.exp(6j * np.asarray(angles)))
    return float(np.mod(np.angle(z) / 6.0, SIXTY))


def rayleigh_p(angles: np.ndarray) -> float:
    """
    Rayleigh test p-value for uniformity on the circle (Zar's approximation).
    Small p rejects uniformity.
    """
    angles = np.asarray(angles, dtype=np.float64)
    n = angles.size
    if n == 0:
        return 1.0
    r_n = np.abs(np.sum(np.exp(1j * angles)))
    p = np.exp(np.sqrt(1 + 4 * n + 4 * (n * n - r_n * r_n)) - (1 + 2 * n))
    return float(min(max(p, 0.0), 1.0))


@dataclass
class PhaseUniformity:
    """Rayleigh p-value on each phase axis, Bonferroni corrected across the three."""

    p_values: List[float]
    alpha: float = 0.05

    @property
    def uniform(self) -> bool:
        return all(p > self.alpha / len(self.p_values) for p in self.p_values)


def phase_uniformity(phases: np.ndarray, alpha: float = 0.05) -> PhaseUniformity:
    phases = np.atleast_2d(phases)
    return PhaseUniformity([rayleigh_p(phases[:, a]) for a in range(phases.shape[1])], alpha)


@dataclass
class ModuleSummary:
    module: int
    units: List[int]
    mean_period: float
    period_std: float
    mean_orientation: float
    uniformity: PhaseUniformity
    period_histogram: Dict[str, List[float]] = field(default_factory=dict)
    orientation_histogram: Dict[str, List[float]] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "module": self.module,
            "units": self.units,
            "size": len(self.units),
            "mean_period": self.mean_period,
            "period_std": self.period_std,
            "mean_orientation_deg": float(np.rad2deg(self.mean_orientation)),
            "phase_uniformity_p": self.uniformity.p_values,
            "phases_uniform": self.uniformity.uniform,
            "period_histogram": self.period_histogram,
            "orientation_histogram": self.orientation_histogram,
        }


@dataclass
class ModuleReport:
    """
    labels[u] is the module index of unit u, UNCLASSIFIED (-1) or DEAD (-2).
    Modules are numbered by increasing period.
    """

    units: List[int]
    labels: np.ndarray
    modules: List[ModuleSummary]

    @property
    def n_modules(self) -> int:
        return len(self.modules)

    @property
    def n_dead(self) -> int:
        return int(np.sum(self.labels == DEAD))

    @property
    def n_unclassified(self) -> int:
        return int(np.sum(self.labels == UNCLASSIFIED))

    def to_dict(self) -> Dict:
        return {
            "n_modules": self.n_modules,
            "n_dead": self.n_dead,
            "n_unclassified": self.n_unclassified,
            "labels": {str(u): int(l) for u, l in zip(self.units, self.labels)},
            "modules": [m.to_dict() for m in self.modules],
        }


def _histogram(values: np.ndarray, bins: int = 20) -> Dict[str, List[float]]:
    counts, edges = np.histogram(values, bins=bins)
    return {"counts": counts.tolist(), "edges": edges.tolist()}


def cluster_modules(summaries: Sequence[UnitSpectralSummary], eps: float = 1.0, min_samples: int = 3) -> ModuleReport:
    """
    DBSCAN over (log period, orientation mod 60) with tolerance-scaled distances.

    The number of modules is not fixed in advance; DBSCAN noise points are
    reported as unclassified.

    Raises:
        AnalysisError: fewer than 2 classified units
    """
    units = [s.unit for s in summaries]
    labels = np.full(len(summaries), UNCLASSIFIED, dtype=int)
    labels[np.array([s.dead for s in summaries], dtype=bool)] = DEAD
    classified = [i for i, s in enumerate(summaries) if s.classified and not s.dead]
    if len(classified) < 2:
        raise AnalysisError(f"need at least 2 classified units to cluster, got {len(classified)}")

    periods = np.array([summaries[i].period for i in classified])
    orientations = np.array([summaries[i].orientation for i in classified])
    found = DBSCAN(eps=eps, min_samples=min_samples, metric="precomputed").fit_predict(
        module_distances(periods, orientations)
    )

    cluster_ids = sorted({c for c in found if c >= 0}, key=lambda c: np.mean(periods[found == c]))
    modules: List[ModuleSummary] = []
    for new_id, c in enumerate(cluster_ids):
        members = found == c
        idx = [classified[k] for k in np.nonzero(members)[0]]
        labels[idx] = new_id
        phases = np.array([summaries[i].phases for i in idx])
        modules.append(ModuleSummary(
            module=new_id,
            units=[units[i] for i in idx],
            mean_period=float(np.mean(periods[members])),
            period_std=float(np.std(periods[members])),
            mean_orientation=circular_mean_60(orientations[members]),
            uniformity=phase_uniformity(phases),
            period_histogram=_histogram(periods[members]),
            orientation_histogram=_histogram(np.rad2deg(orientations[members])),
        ))
    logger.info("Found %d modules among %d classified units", len(modules), len(classified))
    return ModuleReport(units, labels, modules)
