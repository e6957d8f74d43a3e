import numpy as np
import pytest

from config import EvalConfig
from errors import DegenerateStateError, StorageError
from evaluation import (
    ModelSource,
    OracleSource,
    _SampleKeeper,
    arena_generalisation,
    batch_distance_cdf,
    commutation_report,
    commutation_residual,
    compare_to_oracle,
    distance_curves,
    evaluate,
    run_pipeline,
    sample_velocity_pairs,
    trajectory_statistics,
)
from gridcode import default_code, population_states
from model import rollout
from trajectory import sample_batch, sample_eval_trajectory, square_arena


@pytest.fixture
def walk():
    return sample_eval_trajectory(2.0, 0.8, 3000, np.random.default_rng(5))


def test_commutation_is_zero_for_equal_velocities(small_params):
    g = small_params.g0.value
    assert commutation_residual(small_params, g, [0.1, -0.05], [0.1, -0.05]) == 0.0


def test_commutation_is_symmetric(small_params, rng):
    g = small_params.g0.value
    for vi, vj in sample_velocity_pairs(5, rng):
        assert commutation_residual(small_params, g, vi, vj) == commutation_residual(small_params, g, vj, vi)


def test_commutation_report_over_states(small_params, rng):
    states = rollout(small_params, rng.uniform(-0.1, 0.1, size=(4, 2)))
    report = commutation_report(small_params, sample_velocity_pairs(3, rng), states)
    assert report.residuals.shape == (12,)
    assert 0 <= report.mean <= report.max <= 2.0
    assert report.to_dict()["pairs"] == 12


def test_model_source_matches_rollout(small_params, walk):
    chunks = list(ModelSource(small_params).activations(walk, chunk=256))
    assert [c.shape[0] for c in chunks] == [256] * 11 + [184]
    np.testing.assert_array_equal(np.concatenate(chunks), rollout(small_params, walk.velocities))


def test_oracle_source_reads_rates_at_positions(oracle_code, walk):
    source = OracleSource(oracle_code)
    assert source.n_units == 128
    rates = np.concatenate(list(source.activations(walk, chunk=700)))
    np.testing.assert_allclose(rates, oracle_code.rates(walk.positions), atol=1e-12)


def test_sample_keeper_strides_across_chunks():
    keeper = _SampleKeeper(total=100, keep=10)
    chunks = [np.arange(n, dtype=float)[:, None] + offset for n, offset in ((33, 0), (33, 33), (34, 66))]
    assert len(list(keeper.wrap(iter(chunks)))) == 3
    assert keeper.steps.tolist() == list(range(0, 100, 10))
    np.testing.assert_array_equal(keeper.states[:, 0], np.arange(0, 100, 10))


def test_distance_curves(oracle_code, walk):
    states = population_states(oracle_code, walk.positions)
    curves = distance_curves(states, walk.positions, bin_width=0.05, max_separation=1.0, max_lag=50,
                             n_pairs=50_000, rng=np.random.default_rng(0))
    assert curves.separations.shape == curves.spatial.shape
    assert curves.spatial[0] < curves.spatial[5]
    assert curves.lags.tolist() == list(range(1, 51))
    assert curves.temporal[0] < curves.temporal[-1]

    strided = distance_curves(states[::5], walk.positions[::5], max_lag=10, steps=np.arange(0, 3000, 5))
    assert strided.lags.tolist() == list(range(5, 55, 5))


def test_batch_distance_cdf(rng):
    batch = sample_batch(6, 4, rng)
    cdf = batch_distance_cdf(batch, points=11)
    assert cdf["cdf"][0] == 0.0 and cdf["cdf"][-1] == 1.0
    assert np.all(np.diff(cdf["distances"]) >= 0)
    assert cdf["distances"][0] == pytest.approx(0.0, abs=1e-12)


def test_trajectory_statistics(walk):
    stats = trajectory_statistics(walk.velocities, bins=12)
    assert sum(stats["speed"]["counts"]) == 3000
    assert sum(stats["heading"]["counts"]) == 3000
    assert len(stats["heading"]["edges"]) == 13


def test_untrained_network_pipeline_records_errors(small_params, tmp_path):
    report = run_pipeline(ModelSource(small_params), 2.0, rng=np.random.default_rng(0),
                          out_dir=tmp_path, steps=20_000, bin_size=0.1)
    assert len(report.summaries) == 32
    assert report.steps == 20_000
    assert (tmp_path / "ratemaps" / "unit_000.gsrm").exists()
    assert (tmp_path / "montage.ppm").exists()
    data = report.to_dict()
    assert data["distance_curves"]["lags"][0] == 1
    if report.modules is None:
        assert any(e.startswith("modules") for e in report.errors)


def test_oracle_pipeline_small(tmp_path):
    code = default_code()
    report = run_pipeline(OracleSource(code), 2.0, rng=np.random.default_rng(1),
                          out_dir=tmp_path, steps=50_000, bin_size=0.05)
    assert report.ratemaps[0].shape == (40, 40)
    assert (tmp_path / "images" / "unit_000.pgm").exists()
    assert (tmp_path / "images" / "acorr_000.pgm").exists()
    assert (tmp_path / "mean_power.pgm").exists()
    periods = report.periods()
    assert periods.size > 64
    nearest = np.min(np.abs(periods[:, None] - np.array([[0.30, 0.45]])) / np.array([[0.30, 0.45]]), axis=1)
    assert np.all(nearest < 0.1)
    comparison = compare_to_oracle(report, code)
    assert set(comparison) >= {"n_modules", "misassigned", "phases_uniform", "rings"}


def test_unwritable_output_directory(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    with pytest.raises(StorageError):
        run_pipeline(OracleSource(default_code()), 2.0, rng=np.random.default_rng(2),
                     out_dir=blocker / "arena_2m", steps=20_000, bin_size=0.1)


@pytest.mark.slow
def test_oracle_acceptance():
    code = default_code()
    report = evaluate(OracleSource(code), EvalConfig(), seed=0, arenas=[2.0])[0]
    result = compare_to_oracle(report, code)
    assert result["max_period_error"] < 0.05
    assert result["max_orientation_error_deg"] < 2.0
    assert result["min_grid_score"] > 0.5
    assert result["n_modules"] == 2
    assert result["misassigned"] == 0
    assert result["phases_uniform"]
    assert result["rings"] == {"0": 3, "1": 3}


@pytest.mark.slow
def test_oracle_periods_do_not_depend_on_arena():
    code = default_code()
    reports = evaluate(OracleSource(code), EvalConfig(), seed=0, arenas=[2.0, 4.0])
    medians = arena_generalisation(reports)
    assert medians["4"] == pytest.approx(medians["2"], rel=0.05)


def test_collapsed_network_raises_in_evaluation(small_params, walk):
    w, b = small_params.layers[-1]
    w.value[...] = 0.0
    b.value[...] = -1.0
    with pytest.raises(DegenerateStateError):
        list(ModelSource(small_params).activations(walk))
