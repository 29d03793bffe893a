import numpy as np
import pytest

from encrypted_rerl import (STRATEGY_LITERAL, STRATEGY_TREE, IterationTrace, clamp_desirability, client_finish,
                            encrypt_model, encrypt_state, encrypted_step, iterate_encrypted, rotation_sum,
                            run_encrypted_vi)
from errors import CapacityError, InvalidInputError, NeedsBootstrapError, SynthesisFailure
from he_backend import BACKEND_NOISE_SIM, BackendParams, CountingBackend, NoiseBounds, make_backend
from mdp_core import GridWorldSpec, build_grid_world
from rerl_core import (LinearSystem, build_linear_system, encryption_friendly_iterate, reconstruct_policy,
                       solve_direct, value_iterate)


@pytest.mark.parametrize('strategy, rotations, adds', [
    # per row: n rotate calls and n-1 additions, or log2(n) doublings; plus S folds onto Enc(w)
    (STRATEGY_LITERAL, 3 * 8, 3 * 7 + 3),
    (STRATEGY_TREE, 3 * 3, 3 * 3 + 3),
])
def test_step_operation_counts(noise_sim, square_system, strategy, rotations, adds):
    inner, keys = noise_sim
    model = encrypt_model(square_system, inner, keys.evaluation)
    Z = encrypt_state(np.ones(3), inner, keys.evaluation, 3)
    backend = CountingBackend(inner)

    Z_next, wall, boot = encrypted_step(model, Z, backend, keys.evaluation, strategy=strategy)

    assert backend.counts == {'mult': 6, 'rotate': rotations, 'add': adds, 'bootstrap': 1}
    assert Z_next.level == inner.params.levels
    assert 0 <= boot <= wall


@pytest.mark.parametrize('strategy', [STRATEGY_LITERAL, STRATEGY_TREE])
def test_rotation_sum_fills_every_slot(exact_sim, strategy):
    backend, keys = exact_sim
    x = np.arange(1, 9) / 10
    total = rotation_sum(backend.encrypt(x, keys), backend, keys, strategy, (9,))
    assert backend.decrypt(total, keys.secret) == pytest.approx(np.full(8, x.sum()))


def test_two_state_update(toy, two_state_system):
    backend, keys = toy
    model = encrypt_model(two_state_system, backend, keys.evaluation)
    Z0 = encrypt_state([1.0, 1.0], backend, keys.evaluation, 2)

    Z1, _, _ = encrypted_step(model, Z0, backend, keys.evaluation)

    assert backend.decrypt(Z1, keys.secret)[:2] == pytest.approx([0.6, 0.7], abs=1e-3)


def test_zero_noise_matches_plaintext_iteration(exact_sim, square_system):
    backend, keys = exact_sim
    model = encrypt_model(square_system, backend, keys.evaluation)
    run = run_encrypted_vi(model, np.ones(3), 20, backend, keys, test_mode=True)

    expected = value_iterate(square_system, max_iter=20, tol=0.0, record=True).trajectory
    assert len(run.trace.snapshots) == 21
    for got, want in zip(run.trace.snapshots, expected):
        assert np.max(np.abs(got - want)) < 1e-12
    assert run.trace.snapshots[-1] == pytest.approx(
        encryption_friendly_iterate(square_system, np.ones(3), 20, pad_to=8), abs=1e-12)


def test_workers_do_not_change_the_result(noise_sim, square_system):
    backend, keys = noise_sim
    model = encrypt_model(square_system, backend, keys.evaluation)
    Z0 = encrypt_state(np.ones(3), backend, keys.evaluation, 3)

    serial = iterate_encrypted(model, Z0, 3, backend, keys.evaluation, workers=1)
    parallel = iterate_encrypted(model, Z0, 3, backend, keys.evaluation, workers=3)

    assert np.array_equal(serial.Z_T.payload, parallel.Z_T.payload)


def test_step_needs_a_fresh_state(noise_sim, square_system):
    backend, keys = noise_sim
    model = encrypt_model(square_system, backend, keys.evaluation)
    one = backend.encrypt(np.ones(3), keys)
    low = backend.mult(encrypt_state(np.ones(3), backend, keys.evaluation, 3), one, keys)

    with pytest.raises(NeedsBootstrapError):
        encrypted_step(model, low, backend, keys.evaluation)


def test_model_must_fit_in_the_slots(noise_sim):
    backend, keys = noise_sim
    big = LinearSystem(np.full((9, 9), 0.01), np.full(9, 0.5), lam=10.0)
    with pytest.raises(CapacityError):
        encrypt_model(big, backend, keys.evaluation)


def test_state_validation(noise_sim):
    backend, keys = noise_sim
    with pytest.raises(InvalidInputError):
        encrypt_state([1.0, 1.0], backend, keys.evaluation, 3)
    with pytest.raises(InvalidInputError):
        encrypt_state([1.0, 0.0, 1.0], backend, keys.evaluation, 3)
    with pytest.raises(InvalidInputError):
        iterate_encrypted(None, None, 0, backend, keys.evaluation)


def test_trace_statistics(tmp_path):
    trace = IterationTrace([0.2, 0.4, 0.3], [0.1, 0.1, 0.1])
    stats = trace.timing_stats()

    assert stats['min_s'] <= stats['mean_s'] <= stats['max_s']
    assert trace.boot_share == pytest.approx(1 / 3)

    path = tmp_path / 'trace.csv'
    trace.write_csv(str(path))
    assert path.read_text().splitlines()[0] == 'iter,wall_seconds,boot_seconds'
    assert len(path.read_text().splitlines()) == 4


def test_clamp_desirability():
    z, clamped = clamp_desirability(np.array([0.5, -1e-9, 0.0]))
    assert z.tolist() == [0.5, 1e-12, 1e-12]
    assert clamped == 2


def test_client_finish_recovers_the_policy(exact_sim, square_grid):
    backend, keys = exact_sim
    mdp = build_grid_world(square_grid)
    z_star = solve_direct(build_linear_system(mdp, 10.0))

    result = client_finish(backend.encrypt(z_star, keys), backend, keys.secret, mdp, 10.0)

    assert result.clamped == 0
    assert result.z == pytest.approx(z_star)
    assert result.policy == pytest.approx(reconstruct_policy(mdp, z_star, 10.0))


def test_client_finish_clamps_a_few_negative_entries():
    params = BackendParams(ring_degree=32, scale_bits=28, seed=7)
    backend = make_backend(params, BACKEND_NOISE_SIM, NoiseBounds.zero())
    keys = backend.keygen()
    mdp = build_grid_world(GridWorldSpec(width=4, height=4, goal_cell=(0, 0)))
    z = solve_direct(build_linear_system(mdp, 10.0))
    z[-1] = -1e-9

    result = client_finish(backend.encrypt(z, keys), backend, keys.secret, mdp, 10.0)

    assert result.clamped == 1
    assert result.z[-1] == 1e-12
    assert result.policy.sum(axis=1) == pytest.approx(np.ones(16))


def test_client_finish_rejects_garbage(exact_sim, square_grid):
    backend, keys = exact_sim
    mdp = build_grid_world(square_grid)
    with pytest.raises(SynthesisFailure):
        client_finish(backend.encrypt([-0.5, 0.4, -0.1], keys), backend, keys.secret, mdp, 10.0)
