"""
spatial.py

Spatial autocorrelograms and rotational gridness.

The autocorrelogram is the Pearson correlation of a ratemap with itself at
every 2-D offset, counting only bins valid in both copies; all the sums it
needs are obtained as FFT correlations of the map, its square and its
validity mask. Gridness compares the autocorrelogram with rotated copies of
itself over an annulus around the first ring of peaks.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Union

import numpy as np
from scipy import ndimage, signal, stats

from errors import AnalysisError
from ratemaps import Ratemap

logger = logging.getLogger(__name__)

ROTATIONS = (30, 60, 90, 120, 150)


@dataclass
class Autocorrelogram:
    """
    Correlation at offset (dx, dy) is values[nx - 1 + dx, ny - 1 + dy], with
    offsets in bins; NaN where too few bins overlap.
    """

    values: np.ndarray
    bin_size: float

    @property
    def centre(self):
        return tuple((s - 1) // 2 for s in self.values.shape)

    def offsets(self):
        """Offset coordinates in meters along each axis."""
        cx, cy = self.centre
        xs = (np.arange(self.values.shape[0]) - cx) * self.bin_size
        ys = (np.arange(self.values.shape[1]) - cy) * self.bin_size
        return xs, ys

    def radius(self) -> np.ndarray:
        xs, ys = self.offsets()
        return np.hypot(xs[:, None], ys[None, :])


def _correlate(f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """out[n - 1 + d] = sum_p f(p) g(p + d), for every 2-D offset d."""
    return signal.fftconvolve(g, f[::-1, ::-1], mode="full")


def autocorrelogram(ratemap: Union[Ratemap, np.ndarray], bin_size: Optional[float] = None, min_overlap: int = 20, tol: float = 1e-10) -> Autocorrelogram:
    """
    Pearson autocorrelation of a map at all offsets, ignoring NaN bins.

    Args:
        ratemap: Ratemap, or a 2-D array with NaN for invalid bins
        bin_size: Needed when an array is given
        min_overlap: Offsets with fewer jointly valid bins are NaN
        tol: Magnitudes below this are treated as FFT round-off

    Raises:
        AnalysisError: fewer than half the bins are valid, or the map is constant
    """
    if isinstance(ratemap, Ratemap):
        values, bin_size = ratemap.values, ratemap.bin_size
    else:
        values = np.asarray(ratemap, dtype=np.float64)
        bin_size = 1.0 if bin_size is None else bin_size
    valid = np.isfinite(values)
    if valid.mean() < 0.5:
        raise AnalysisError(f"only {valid.mean():.0%} of bins are valid; need at least 50%")
    x = np.where(valid, values, 0.0)
    if np.ptp(x[valid]) == 0:
        raise AnalysisError("constant map: correlations are undefined")
    m = valid.astype(np.float64)

    n = np.round(_correlate(m, m))
    s1 = _correlate(x, m)
    s2 = _correlate(m, x)
    ss1 = _correlate(x * x, m)
    ss2 = _correlate(m, x * x)
    sxy = _correlate(x, x)
    for a in (s1, s2, ss1, ss2, sxy):
        a[np.abs(a) < tol] = 0.0

    with np.errstate(invalid="ignore", divide="ignore"):
        var1 = n * ss1 - s1 * s1
        var2 = n * ss2 - s2 * s2
        denom = np.sqrt(np.clip(var1, 0, None) * np.clip(var2, 0, None))
        corr = (n * sxy - s1 * s2) / denom
    corr[(n < min_overlap) | ~(denom > tol)] = np.nan
    return Autocorrelogram(np.clip(corr, -1.0, 1.0), float(bin_size))


def _parabolic(left: float, centre: float, right: float) -> float:
    denom = left - 2 * centre + right
    if not np.isfinite(denom) or denom == 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))


@dataclass
class RingPeaks:
    """Nearest ring of autocorrelogram peaks around the centre."""

    xy: np.ndarray
    distances: np.ndarray
    angles: np.ndarray

    @property
    def count(self) -> int:
        return self.distances.size

    @property
    def radius(self) -> float:
        return float(np.mean(self.distances)) if self.count else float("nan")


def ring_peaks(acorr: Autocorrelogram, min_peak: float = 0.1, ring_tolerance: float = 1.25, size: int = 3) -> RingPeaks:
    """
    Local maxima of the autocorrelogram closest to the centre.

    Peaks are refined to sub-bin precision with a parabola along each axis
    and searched within half the map extent. The ring is every peak within
    `ring_tolerance` times the nearest peak distance.
    """
    values = acorr.values
    filled = np.where(np.isfinite(values), values, -np.inf)
    is_peak = (filled == ndimage.maximum_filter(filled, size=size, mode="constant", cval=-np.inf)) & (filled > min_peak)
    cx, cy = acorr.centre
    is_peak[cx, cy] = False
    radius = acorr.radius()
    is_peak &= radius <= 0.5 * min(cx, cy) * acorr.bin_size
    is_peak[[0, -1], :] = False
    is_peak[:, [0, -1]] = False

    ix, iy = np.nonzero(is_peak)
    if ix.size == 0:
        return RingPeaks(np.zeros((0, 2)), np.zeros(0), np.zeros(0))
    xy = np.empty((ix.size, 2))
    for k, (i, j) in enumerate(zip(ix, iy)):
        dx = _parabolic(filled[i - 1, j], filled[i, j], filled[i + 1, j])
        dy = _parabolic(filled[i, j - 1], filled[i, j], filled[i, j + 1])
        xy[k] = ((i + dx - cx) * acorr.bin_size, (j + dy - cy) * acorr.bin_size)
    distances = np.hypot(xy[:, 0], xy[:, 1])
    ring = distances <= ring_tolerance * distances.min()
    xy, distances = xy[ring], distances[ring]
    angles = np.arctan2(xy[:, 1], xy[:, 0])
    order = np.argsort(np.mod(angles, 2 * np.pi))
    return RingPeaks(xy[order], distances[order], angles[order])


@dataclass
class GridScore:
    """Gridness and the rotational correlations it was computed from; NaN when undefined."""

    score: float
    radius: float
    rotations: Dict[int, float] = field(default_factory=dict)

    @property
    def defined(self) -> bool:
        return bool(np.isfinite(self.score))


def grid_score(acorr: Autocorrelogram, inner: float = 0.5, outer: float = 1.5) -> GridScore:
    """
    min(r60, r120) - max(r30, r90, r150) over the annulus
    [inner, outer] x the first-ring radius.

    Rotations use bilinear resampling about the centre bin. Without a ring
    of peaks the score is undefined (NaN).
    """
    peaks = ring_peaks(acorr)
    if peaks.count == 0:
        logger.debug("No peak ring found; grid score undefined")
        return GridScore(float("nan"), float("nan"))
    radius = peaks.radius
    r = acorr.radius()
    annulus = (r >= inner * radius) & (r <= outer * radius)
    valid = np.isfinite(acorr.values)
    base = np.where(valid, acorr.values, 0.0)

    rotations: Dict[int, float] = {}
    for angle in ROTATIONS:
        rotated = ndimage.rotate(base, angle, reshape=False, order=1, mode="constant", cval=0.0)
        rotated_valid = ndimage.rotate(valid.astype(np.float64), angle, reshape=False, order=1, mode="constant", cval=0.0) > 0.999
        use = annulus & valid & rotated_valid
        if use.sum() < 3 or np.ptp(base[use]) == 0 or np.ptp(rotated[use]) == 0:
            return GridScore(float("nan"), radius, rotations)
        rotations[angle] = float(stats.pearsonr(base[use], rotated[use])[0])

    score = min(rotations[60], rotations[120]) - max(rotations[30], rotations[90], rotations[150])
    return GridScore(float(score), radius, rotations)
