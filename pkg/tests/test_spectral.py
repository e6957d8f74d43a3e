import numpy as np
import pytest

from errors import AnalysisError
from evaluation import oracle_ratemaps
from gridcode import IdealCode, IdealModule, ideal_module, phase_of_position
from ratemaps import Ratemap
from spectral import fourier_summary, mean_power_spectrum, power_spectrum
from trajectory import square_arena


def circular_difference(a, b):
    return np.abs(np.angle(np.exp(1j * (np.asarray(a) - np.asarray(b)))))


@pytest.fixture(scope="module")
def hex_maps():
    module = ideal_module(0.4, np.deg2rad(12.0), grid=4)
    return module, oracle_ratemaps(IdealCode([module]), arena=2.0, bin_size=0.02)


def test_oracle_period_and_orientation(hex_maps):
    _, maps = hex_maps
    summary = fourier_summary(maps[3])
    assert summary.classified
    assert summary.period == pytest.approx(0.4, rel=0.05)
    assert np.rad2deg(summary.orientation) == pytest.approx(12.0, abs=2.0)
    assert summary.peak_ratio >= 30
    assert summary.gridness > 0.5


def test_oracle_phases(hex_maps):
    module, maps = hex_maps
    truth = np.mod(module.phase_triples(), 2 * np.pi)
    for unit in (0, 5, 10, 15):
        summary = fourier_summary(maps[unit], with_gridness=False)
        assert np.all(circular_difference(summary.phases, truth[unit]) < 0.35), unit
        assert circular_difference(summary.phases.sum(), 0.0) < 1e-9
        assert abs(summary.phase_residual) < 0.5


def test_phase_sign_convention():
    x0 = np.array([0.13, -0.21])
    module = IdealModule(0.4, np.deg2rad(12.0), np.zeros((1, 2)))
    module.phases = -phase_of_position(module, x0)[None, :]
    assert module.rates(x0)[0, 0] == pytest.approx(1.0)
    ratemap = oracle_ratemaps(IdealCode([module]), arena=2.0, bin_size=0.02)[0]
    summary = fourier_summary(ratemap, with_gridness=False)
    expected = np.mod(-(module.wavevectors @ x0), 2 * np.pi)
    assert np.all(circular_difference(summary.phases, expected) < 0.35)


def test_noise_is_unclassified():
    values = np.random.default_rng(0).random((100, 100))
    ratemap = Ratemap(0, square_arena(2.0), 0.02, values, np.ones((100, 100)), float(values.max()))
    summary = fourier_summary(ratemap, with_gridness=False)
    assert not summary.classified
    assert np.isnan(summary.period)


def test_dead_unit_summary():
    ratemap = Ratemap(4, square_arena(2.0), 0.02, np.zeros((100, 100)), np.ones((100, 100)), 0.0)
    summary = fourier_summary(ratemap)
    assert summary.dead and not summary.classified
    assert summary.to_dict()["unit"] == 4


def test_power_spectrum_peak_frequency(hex_maps):
    _, maps = hex_maps
    spectrum = power_spectrum(maps[0].values, 0.02)
    i, j = np.unravel_index(np.argmax(spectrum.power), spectrum.power.shape)
    peak = np.hypot(spectrum.freqs[i], spectrum.freqs[j])
    assert peak == pytest.approx(2 / (np.sqrt(3) * 0.4), rel=0.05)


def test_mean_power_spectrum(hex_maps):
    _, maps = hex_maps
    mean = mean_power_spectrum(maps[:4])
    assert mean.power.sum() == pytest.approx(1.0)
    dead = Ratemap(0, square_arena(2.0), 0.02, np.zeros((100, 100)), np.ones((100, 100)), 0.0)
    with pytest.raises(AnalysisError):
        mean_power_spectrum([dead])
