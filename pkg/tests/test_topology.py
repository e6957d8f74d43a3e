import numpy as np
import pytest

from errors import AnalysisError
from gridcode import ideal_module, ring_module
from topology import MIN_SAMPLES, ring_projection, torus_analysis


def module_states(module, n=6000, seed=0):
    positions = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(n, 2))
    return module.rates(positions)


def test_hexagonal_module_gives_three_rings():
    module = ideal_module(0.4, np.deg2rad(7.5), grid=8)
    report = torus_analysis(module_states(module), module.phase_triples(), embed=False)
    assert report.n_rings == 3
    assert not report.degenerate
    for projection in report.projections:
        assert projection.ringness < 0.15
        assert projection.resultant < 0.5


def test_ring_module_gives_one_ring():
    module = ring_module(0.4, n_cells=32)
    report = torus_analysis(module_states(module), module.phase_triples(), embed=False)
    assert report.n_rings == 1
    assert report.projections[0].is_ring
    assert report.projections[1].degenerate and report.projections[2].degenerate


def test_needs_enough_samples():
    module = ideal_module(0.4, grid=4)
    with pytest.raises(AnalysisError):
        torus_analysis(module_states(module, n=MIN_SAMPLES - 1), module.phase_triples())
    with pytest.raises(AnalysisError):
        torus_analysis(module_states(module), module.phase_triples()[:3])


def test_constant_states_are_degenerate():
    module = ideal_module(0.4, grid=4)
    report = torus_analysis(np.ones((MIN_SAMPLES, 16)), module.phase_triples())
    assert report.degenerate
    assert report.embedding is None
    assert report.n_rings == 0


def test_zero_projection_is_degenerate():
    states = np.ones((100, 4))
    phases = np.array([0.0, np.pi / 2, np.pi, 3 * np.pi / 2])
    projection = ring_projection(states, phases, axis=0)
    assert projection.degenerate and not projection.is_ring


def test_embedding_shape():
    module = ideal_module(0.4, grid=4)
    report = torus_analysis(module_states(module, n=MIN_SAMPLES), module.phase_triples(), max_samples=2000)
    assert report.n_samples == 2000
    assert report.embedding.shape == (2000, 3)
    assert report.explained_variance.shape == (6,)
    assert report.to_dict()["n_rings"] == report.n_rings
