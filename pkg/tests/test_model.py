import numpy as np
import pytest

import autodiff as ad
from errors import DegenerateStateError, ShapeError
from model import (
    TRAINING_EPS,
    init_params,
    initial_state,
    interaction_matrix,
    norm_relu,
    norm_relu_numpy,
    rollout,
    rollout_chunks,
    step_numpy,
    unroll,
    unroll_batch,
)
from trajectory import sample_batch


def test_initial_state_is_unit_and_nonnegative():
    g0 = initial_state(16)
    assert np.all(g0 >= 0)
    assert np.linalg.norm(g0) == pytest.approx(1.0, abs=1e-15)


def test_layer_shapes(small_params):
    shapes = [(w.shape, b.shape) for w, b in small_params.layers]
    assert shapes == [((2, 16), (16,)), ((16, 16), (16,)), ((16, 1024), (1024,))]
    assert interaction_matrix(small_params, [0.1, -0.05]).shape == (32, 32)
    assert not small_params.g0.requires_grad
    assert len(small_params.trainable()) == 6


def test_train_g0_adds_a_trainable_tensor():
    params = init_params(n_units=4, hidden=8, rng=np.random.default_rng(0), train_g0=True)
    assert params.trainable()[-1] is params.g0


def test_unroll_states_live_on_the_positive_sphere(small_params, rng):
    velocities = rng.uniform(-0.15, 0.15, size=(20, 2))
    states = unroll(small_params, velocities).states
    assert states.shape == (20, 32)
    assert np.all(states >= 0)
    np.testing.assert_allclose(np.linalg.norm(states, axis=1), 1.0, atol=1e-9)


@pytest.mark.slow
def test_state_invariants_over_many_unrolls(small_params):
    rng = np.random.default_rng(5)
    with ad.no_grad():
        for _ in range(100):
            table = rng.uniform(-0.15, 0.15, size=(1000, 2))
            index = np.arange(1000).reshape(100, 10)
            states = unroll_batch(small_params, table, index).states.value
            assert np.all(states >= 0)
            np.testing.assert_allclose(np.linalg.norm(states, axis=-1), 1.0, atol=1e-9)


def test_empty_unroll(small_params):
    assert len(unroll(small_params, np.zeros((0, 2)))) == 0
    assert rollout(small_params, np.zeros((0, 2))).shape == (0, 32)


def test_batched_unroll_matches_single_unrolls(small_params, rng):
    batch = sample_batch(6, 3, rng)
    states = unroll_batch(small_params, batch.base_velocities, batch.permutations).states.value
    for b in range(3):
        np.testing.assert_allclose(states[b], unroll(small_params, batch.velocities[b]).states, atol=1e-12)


def test_numpy_rollout_matches_autodiff(small_params, rng):
    velocities = rng.uniform(-0.15, 0.15, size=(40, 2))
    expected = unroll(small_params, velocities).states
    np.testing.assert_allclose(rollout(small_params, velocities), expected, atol=1e-12)
    chunks = list(rollout_chunks(small_params, velocities, chunk=7))
    assert [c.shape[0] for c in chunks] == [7, 7, 7, 7, 7, 5]
    np.testing.assert_allclose(np.concatenate(chunks), expected, atol=1e-12)


def test_step_numpy_matches_rollout(small_params):
    v = np.array([0.03, -0.02])
    g1 = step_numpy(small_params, small_params.g0.value, v)
    np.testing.assert_allclose(g1, rollout(small_params, v[None, :])[0], atol=1e-14)


def test_norm_relu_degenerate_input():
    with pytest.raises(DegenerateStateError):
        norm_relu(ad.constant([[-1.0, -2.0]]))
    out = norm_relu(ad.constant([[-1.0, -2.0]]), eps=TRAINING_EPS)
    np.testing.assert_array_equal(out.value, [[0.0, 0.0]])
    with pytest.raises(DegenerateStateError) as info:
        norm_relu_numpy(np.array([-1.0, 0.0]), step=5)
    assert info.value.step == 5


def test_unroll_reports_collapse_step():
    params = init_params(n_units=4, hidden=8, rng=np.random.default_rng(0))
    w, b = params.layers[-1]
    w.value[...] = 0.0
    b.value[...] = -1.0
    with pytest.raises(DegenerateStateError) as info:
        unroll(params, np.zeros((3, 2)))
    assert info.value.step == 0


def test_velocities_must_be_pairs(small_params):
    with pytest.raises(ShapeError):
        unroll_batch(small_params, np.zeros((3, 2)), np.zeros(3, dtype=int))


def test_copy_and_astype(small_params):
    twin = small_params.copy()
    twin.layers[0][0].value[0, 0] += 1.0
    assert twin.layers[0][0].value[0, 0] != small_params.layers[0][0].value[0, 0]
    single = small_params.astype(np.float32)
    assert single.dtype == np.float32
    assert rollout(single, np.zeros((2, 2))).dtype == np.float32
