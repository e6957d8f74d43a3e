"""
topology.py

Manifold structure of one module's population activity.

States are reduced to 6 dimensions with PCA and then embedded in 3 with a
Laplacian eigenmap over a 15-nearest-neighbour graph. Independently, each
state is projected onto each of the three phase axes as
z_a = sum_i exp(i phi_a_i) g_i; on a torus every projection traces a ring.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from sklearn.decomposition import PCA
from sklearn.manifold import SpectralEmbedding

from errors import AnalysisError

logger = logging.getLogger(__name__)

MIN_SAMPLES = 5000
RINGNESS_THRESHOLD = 0.15
RING_RESULTANT = 0.5
DEGENERATE_RESULTANT = 0.9


@dataclass
class RingProjection:
    """Shape of one phase-axis projection of the states."""

    axis: int
    ringness: float
    resultant: float
    mean_radius: float
    is_ring: bool
    degenerate: bool

    def to_dict(self) -> Dict:
        return {
            "axis": self.axis,
            "ringness": self.ringness,
            "resultant": self.resultant,
            "mean_radius": self.mean_radius,
            "is_ring": self.is_ring,
            "degenerate": self.degenerate,
        }


@dataclass
class TorusReport:
    n_samples: int
    projections: List[RingProjection]
    explained_variance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    embedding: Optional[np.ndarray] = field(default=None, repr=False)
    degenerate: bool = False

    @property
    def n_rings(self) -> int:
        return sum(p.is_ring for p in self.projections)

    def to_dict(self) -> Dict:
        return {
            "n_samples": self.n_samples,
            "n_rings": self.n_rings,
            "degenerate": self.degenerate,
            "explained_variance_ratio": self.explained_variance.tolist(),
            "projections": [p.to_dict() for p in self.projections],
        }


def ring_projection(states: np.ndarray, phases: np.ndarray, axis: int) -> RingProjection:
    """
    Project states onto one phase axis and measure how ring-like the result is.

    Ring-ness is std(radius) / mean(radius); a projection is a ring when that
    is below RINGNESS_THRESHOLD and its angles are spread (mean resultant
    length below RING_RESULTANT). It is degenerate when the angles collapse
    (resultant above DEGENERATE_RESULTANT) or the radius vanishes.
    """
    z = states @ np.exp(1j * phases)
    radius = np.abs(z)
    mean_radius = float(np.mean(radius))
    scale = float(np.mean(np.linalg.norm(states, axis=1))) or 1.0
    if mean_radius <= 1e-9 * scale:
        return RingProjection(axis, float("inf"), 0.0, mean_radius, False, True)
    ringness = float(np.std(radius) / mean_radius)
    resultant = float(np.abs(np.mean(np.exp(1j * np.angle(z)))))
    degenerate = resultant > DEGENERATE_RESULTANT
    is_ring = ringness < RINGNESS_THRESHOLD and resultant < RING_RESULTANT
    return RingProjection(axis, ringness, resultant, mean_radius, is_ring, degenerate)


def torus_analysis(
    states: np.ndarray,
    phases: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    max_samples: int = MIN_SAMPLES,
    n_neighbors: int = 15,
    embed: bool = True,
) -> TorusReport:
    """
    Embed one module's states and project them onto its phase axes.

    Args:
        states: P x M activity of the module's M units (rows renormalised here)
        phases: M x 3 unit phases
        rng: Generator for subsampling
        max_samples: States kept for the embedding
        n_neighbors: Neighbourhood size of the embedding graph
        embed: Skip the PCA / spectral embedding when False

    Raises:
        AnalysisError: fewer than 5000 samples, or shapes disagree
    """
    states = np.asarray(states, dtype=np.float64)
    phases = np.atleast_2d(np.asarray(phases, dtype=np.float64))
    if states.shape[0] < MIN_SAMPLES:
        raise AnalysisError(f"torus analysis needs at least {MIN_SAMPLES} samples, got {states.shape[0]}")
    if phases.shape[0] != states.shape[1]:
        raise AnalysisError(f"{phases.shape[0]} unit phases for {states.shape[1]} units")
    rng = rng if rng is not None else np.random.default_rng(0)
    if states.shape[0] > max_samples:
        states = states[rng.choice(states.shape[0], size=max_samples, replace=False)]
    norms = np.linalg.norm(states, axis=1, keepdims=True)
    states = states / np.where(norms > 0, norms, 1.0)

    projections = [ring_projection(states, phases[:, a], a) for a in range(phases.shape[1])]
    report = TorusReport(states.shape[0], projections)

    centred = states - states.mean(axis=0)
    if np.allclose(centred, 0.0, atol=1e-12):
        logger.warning("Constant states: embedding is degenerate")
        report.degenerate = True
        return report
    if embed:
        n_pca = min(6, states.shape[1], states.shape[0])
        pca = PCA(n_components=n_pca, random_state=0)
        reduced = pca.fit_transform(states)
        report.explained_variance = pca.explained_variance_ratio_
        seed = int(rng.integers(0, 2 ** 31 - 1))
        embedding = SpectralEmbedding(
            n_components=3, affinity="nearest_neighbors", n_neighbors=n_neighbors, random_state=seed
        )
        report.embedding = embedding.fit_transform(reduced)
    return report
