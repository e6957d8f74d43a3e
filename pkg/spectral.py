"""
spectral.py

Fourier analysis of ratemaps: the dominant hexagonal wavevector triple,
the lattice period and orientation it implies, and each unit's three phases.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import AnalysisError
from ratemaps import Ratemap
from spatial import autocorrelogram, grid_score

logger = logging.getLogger(__name__)

PAD = 1024
PEAK_RATIO_THRESHOLD = 30.0
SECOND_PEAK_RATIO = 0.25
OFF_AXIS_RATIO = 0.5
SEARCH_WINDOW = 0.15
TWO_PI = 2.0 * np.pi


@dataclass
class UnitSpectralSummary:
    """
    Period (m), orientation (rad, in [0, pi/3)), phases (rad) and gridness of
    one unit. Unclassified and dead units carry NaN estimates.
    """

    unit: int
    period: float = float("nan")
    orientation: float = float("nan")
    phases: np.ndarray = field(default_factory=lambda: np.full(3, np.nan))
    phase_residual: float = float("nan")
    gridness: float = float("nan")
    peak_ratio: float = float("nan")
    wavevectors: Optional[np.ndarray] = None
    dead: bool = False
    classified: bool = False

    def to_dict(self) -> Dict:
        return {
            "unit": self.unit,
            "period": self.period,
            "orientation_deg": float(np.rad2deg(self.orientation)),
            "phases": [float(p) for p in self.phases],
            "phase_residual": self.phase_residual,
            "gridness": self.gridness,
            "peak_ratio": self.peak_ratio,
            "dead": self.dead,
            "classified": self.classified,
        }


@dataclass
class PowerSpectrum:
    """Centred power spectrum; power[i, j] is at frequency (freqs[i], freqs[j]) in cycles/m."""

    freqs: np.ndarray
    power: np.ndarray

    @property
    def step(self) -> float:
        return float(self.freqs[1] - self.freqs[0])

    def radius(self) -> np.ndarray:
        return np.hypot(self.freqs[:, None], self.freqs[None, :])

    def index_of(self, f: np.ndarray) -> Tuple[int, int]:
        i = int(np.clip(np.round((f[0] - self.freqs[0]) / self.step), 0, self.freqs.size - 1))
        j = int(np.clip(np.round((f[1] - self.freqs[0]) / self.step), 0, self.freqs.size - 1))
        return i, j


def power_spectrum(values: np.ndarray, bin_size: float, pad: int = PAD) -> PowerSpectrum:
    """Zero-padded 2-D power spectrum of a mean-subtracted map (NaN bins as zero)."""
    values = np.asarray(values, dtype=np.float64)
    valid = np.isfinite(values)
    if not valid.any():
        raise AnalysisError("map has no valid bins")
    x = np.where(valid, values - np.mean(values[valid]), 0.0)
    size = max(pad, int(2 ** np.ceil(np.log2(2 * max(values.shape)))))
    transform = np.fft.fftshift(np.fft.fft2(x, s=(size, size)))
    freqs = np.fft.fftshift(np.fft.fftfreq(size, d=bin_size))
    return PowerSpectrum(freqs, np.abs(transform) ** 2)


def _vertex_offset(left: float, centre: float, right: float) -> float:
    """Sub-bin peak offset from a parabola through log power."""
    with np.errstate(divide="ignore"):
        l, c, r = np.log(np.maximum([left, centre, right], 1e-300))
    denom = l - 2 * c + r
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (l - r) / denom, -0.5, 0.5))


def _refine(spectrum: PowerSpectrum, i: int, j: int) -> np.ndarray:
    p = spectrum.power
    n = p.shape[0]
    di = _vertex_offset(p[i - 1, j], p[i, j], p[i + 1, j]) if 0 < i < n - 1 else 0.0
    dj = _vertex_offset(p[i, j - 1], p[i, j], p[i, j + 1]) if 0 < j < n - 1 else 0.0
    return np.array([spectrum.freqs[0] + (i + di) * spectrum.step, spectrum.freqs[0] + (j + dj) * spectrum.step])


def _local_peak(spectrum: PowerSpectrum, target: np.ndarray, window: float) -> Tuple[np.ndarray, float]:
    """Refined location and power of the largest bin within `window` of `target`."""
    fx, fy = spectrum.freqs[:, None], spectrum.freqs[None, :]
    near = np.hypot(fx - target[0], fy - target[1]) <= window
    masked = np.where(near, spectrum.power, -np.inf)
    i, j = np.unravel_index(int(np.argmax(masked)), masked.shape)
    return _refine(spectrum, i, j), float(spectrum.power[i, j])


def _rotate(f: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * f[0] - s * f[1], s * f[0] + c * f[1]])


def hex_triple(spectrum: PowerSpectrum, min_frequency: float) -> Optional[Tuple[np.ndarray, float, float]]:
    """
    Canonical wavevector triple (cycles/m) of the spectrum.

    k1 is the dominant peak direction with angle in [0, 60) degrees, k2 the
    peak found near k1 rotated by 120 degrees, k3 = -k1 - k2.

    Returns:
        (3 x 2 frequencies, peak-to-mean ratio, k2/k1 power ratio), or None
        when there is no hexagonal structure
    """
    radius = spectrum.radius()
    usable = radius >= min_frequency
    power = np.where(usable, spectrum.power, 0.0)
    mean_power = float(np.mean(spectrum.power[usable]))
    if mean_power <= 0:
        return None
    i, j = np.unravel_index(int(np.argmax(power)), power.shape)
    strongest = np.array([spectrum.freqs[i], spectrum.freqs[j]])
    magnitude = float(np.hypot(*strongest))
    ratio = float(spectrum.power[i, j]) / mean_power

    angle = np.mod(np.arctan2(strongest[1], strongest[0]), np.pi / 3)
    window = SEARCH_WINDOW * magnitude
    k1, p1 = _local_peak(spectrum, magnitude * np.array([np.cos(angle), np.sin(angle)]), window)
    k2, p2 = _local_peak(spectrum, _rotate(k1, 2 * np.pi / 3), window)
    off_axis = spectrum.power[spectrum.index_of(_rotate(k1, np.pi / 6))]
    if p1 <= 0 or p2 / p1 < SECOND_PEAK_RATIO or off_axis > OFF_AXIS_RATIO * p1:
        return None
    return np.array([k1, k2, -k1 - k2]), ratio, p2 / p1


def unit_phases(ratemap: Ratemap, wavevectors: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    phi_a = arg sum_x r(x) exp(-i k_a . x) over valid bins, projected onto
    phi_1 + phi_2 + phi_3 = 0 (mod 2 pi).

    Args:
        ratemap: The unit's map
        wavevectors: 3 x 2 wavevectors in rad/m

    Returns:
        (phases in [0, 2 pi), wrapped closure residual before projection)
    """
    xs, ys = ratemap.bin_centres()
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    valid = ratemap.valid
    coords = np.column_stack([gx[valid], gy[valid]])
    rates = ratemap.values[valid]
    raw = np.angle(np.exp(-1j * coords @ wavevectors.T).T @ rates)
    residual = float(np.angle(np.exp(1j * raw.sum())))
    return np.mod(raw - residual / 3.0, TWO_PI), residual


def fourier_summary(ratemap: Ratemap, pad: int = PAD, with_gridness: bool = True) -> UnitSpectralSummary:
    """
    Spectral summary of one unit.

    A unit is classified when its spectrum has a dominant peak at least
    PEAK_RATIO_THRESHOLD times the mean power and a hexagonal partner peak.
    Period is 2 / (sqrt(3) |f|) for the mean wavevector frequency |f|.

    Phases use the sign convention of the rate model r(x) ~ cos(k_a . x + phi_a):
    they are recovered as arg sum_x r(x) exp(-i k_a . x), so a cell whose
    fields sit at x0 gets phi_a = -k_a . x0 (mod 2 pi).
    """
    summary = UnitSpectralSummary(unit=ratemap.unit, dead=ratemap.dead)
    if ratemap.dead:
        return summary
    if with_gridness:
        try:
            summary.gridness = grid_score(autocorrelogram(ratemap)).score
        except AnalysisError as e:
            logger.debug("Unit %d: no gridness (%s)", ratemap.unit, e)

    extent = min(ratemap.shape) * ratemap.bin_size
    try:
        spectrum = power_spectrum(ratemap.values, ratemap.bin_size, pad)
    except AnalysisError:
        return summary
    triple = hex_triple(spectrum, min_frequency=1.5 / extent)
    if triple is None:
        return summary
    freqs, ratio, _ = triple
    summary.peak_ratio = ratio
    if ratio < PEAK_RATIO_THRESHOLD:
        return summary

    f_mean = float(np.mean(np.hypot(freqs[:2, 0], freqs[:2, 1])))
    summary.period = 2.0 / (np.sqrt(3.0) * f_mean)
    summary.orientation = float(np.mod(np.arctan2(freqs[0, 1], freqs[0, 0]), np.pi / 3))
    summary.wavevectors = TWO_PI * freqs
    summary.phases, summary.phase_residual = unit_phases(ratemap, summary.wavevectors)
    summary.classified = True
    return summary


def mean_power_spectrum(ratemaps: Sequence[Ratemap], pad: int = PAD) -> PowerSpectrum:
    """Average of per-unit spectra, each normalised to unit total power."""
    spectra: List[np.ndarray] = []
    freqs = None
    for ratemap in ratemaps:
        if ratemap.dead:
            continue
        spectrum = power_spectrum(ratemap.values, ratemap.bin_size, pad)
        total = spectrum.power.sum()
        if total > 0:
            spectra.append(spectrum.power / total)
            freqs = spectrum.freqs
    if not spectra:
        raise AnalysisError("no live units to average")
    return PowerSpectrum(freqs, np.mean(spectra, axis=0))
