import json
import math

import numpy as np
import pytest

from analysis import (BoundParameters, bound_parameters, compute_beta, contraction_violations, err_metric,
                      limsup_bound, read_report_csv, spectral_radius, theorem_bound, verify_run)
from encrypted_rerl import encrypt_model, run_encrypted_vi
from errors import InvalidInputError
from experiment import canonical_grid
from he_backend import (BACKEND_NOISE_SIM, BackendParams, NoiseBounds, calibrate_noise_bounds,
                        default_injected_bounds, make_backend)
from mdp_core import GridWorldSpec, build_grid_world
from rerl_core import build_linear_system, solve_direct, value_iterate

RUNS_PER_LAYOUT = 100

# two free cells in a row, the only size the canonical layouts skip
CORRIDOR = GridWorldSpec(width=3, height=1, goal_cell=(0, 2))


def test_beta_formula():
    assert compute_beta(3, NoiseBounds.zero()) == (0.0, 0.0)

    bounds = NoiseBounds(b_enc=1e-7, b_mult=1e-6, b_rot=1e-6, b_boot=1e-5)
    beta0, beta = compute_beta(3, bounds)
    assert beta0 == 1e-7
    assert beta == pytest.approx(1.91e-5)

    _, doubled = compute_beta(6, bounds)
    assert doubled - (1e-7 + 1e-5) == pytest.approx(2 * (beta - 1e-7 - 1e-5))

    _, windowed = compute_beta(3, bounds, window=8)
    assert windowed == pytest.approx(8 * 2e-6 + 3e-6 + 1e-7 + 1e-5)


def test_bound_at_fifty_steps():
    params = BoundParameters(beta0=1e-7, beta=1e-5, alpha=0.9512, z0_gap=1.0)
    value = theorem_bound(params, 50)

    assert value == pytest.approx(0.9512 ** 50 * (1 + 1e-7) + 1e-5 / 0.0488)
    assert 0.9512 ** 50 == pytest.approx(0.0822, abs=5e-4)
    assert 1e-5 / 0.0488 == pytest.approx(2.05e-4, abs=1e-6)


def test_bound_shape():
    params = BoundParameters(beta0=1e-7, beta=1e-5, alpha=0.5, z0_gap=2.0)
    curve = [theorem_bound(params, k) for k in range(80)]

    assert curve[0] == pytest.approx(2.0 + 1e-7 + 2e-5)
    assert all(b <= a for a, b in zip(curve, curve[1:]))
    assert curve[-1] == pytest.approx(limsup_bound(params), abs=1e-12)

    noiseless = BoundParameters(beta0=0.0, beta=0.0, alpha=0.5, z0_gap=2.0)
    assert theorem_bound(noiseless, 3) == 0.25


def test_bound_rejects_non_contractive_rate():
    with pytest.raises(InvalidInputError):
        BoundParameters(beta0=0.0, beta=0.0, alpha=1.0, z0_gap=1.0)


def test_err_metric():
    z_star = np.array([0.2, 0.4, 0.6])
    assert err_metric(z_star, z_star) == 0.0
    assert err_metric(z_star + 0.01 * z_star.mean(), z_star) == pytest.approx(0.01)
    with pytest.raises(InvalidInputError):
        err_metric(z_star[:2], z_star)


def test_err_metric_reference_magnitudes():
    z_star = 1e-2 * np.array([2.4295, 4.1524, 3.5592, 3.7762])
    z_tilde = 1e-2 * np.array([2.4290, 4.1518, 3.5588, 3.7758])
    # 4.75e-6 mean deviation over a 3.4793e-2 mean
    assert err_metric(z_tilde, z_star) == pytest.approx(1.365e-4, rel=1e-3)


def test_spectral_radius_is_below_the_row_sum(square_system):
    assert spectral_radius(square_system.A) <= square_system.A.sum(axis=1).max() + 1e-12


def test_exact_iteration_contracts(square_system):
    z_star = solve_direct(square_system)
    trajectory = value_iterate(square_system, max_iter=50, tol=0.0, record=True).trajectory
    alpha = square_system.A.sum(axis=1).max()

    assert contraction_violations(trajectory, z_star, alpha) == []
    assert contraction_violations(trajectory, z_star, 0.1) != []


def _conformance(size, seed, injected=None, reference=None):
    params = BackendParams(ring_degree=32 if size > 8 else 16, scale_bits=28, seed=seed)
    backend = make_backend(params, BACKEND_NOISE_SIM, injected)
    keys = backend.keygen()
    layout = CORRIDOR if size == 2 else canonical_grid(size)
    system = build_linear_system(build_grid_world(layout), 10.0)
    z_star = solve_direct(system)
    bounds = reference or calibrate_noise_bounds(backend, keys, trials=100).bounds

    model = encrypt_model(system, backend, keys.evaluation)
    run = run_encrypted_vi(model, np.ones(size), 50, backend, keys, test_mode=True)
    bp = bound_parameters(system, bounds, np.ones(size), window=backend.slot_count, z_star=z_star)
    return verify_run(run.trace.snapshots, system, bp, z_star)


@pytest.mark.parametrize('size', [1, 2, 3, 7, 15])
def test_noisy_runs_respect_the_bound(size):
    for seed in range(RUNS_PER_LAYOUT):
        report = _conformance(size, seed)
        assert report.violations == 0, f'seed {seed}: {report.summary()}'
        assert all(r <= report.params.beta for r in report.residuals)


def test_zero_noise_run_is_inside_the_bound():
    report = _conformance(3, 0, injected=NoiseBounds.zero())

    assert report.violations == 0
    assert max(report.residuals) < 1e-12
    assert report.params.beta == 0.0


def test_excess_bootstrap_noise_is_flagged():
    params = BackendParams(ring_degree=16, scale_bits=28, seed=0)
    nominal = default_injected_bounds(params)
    backend = make_backend(params, BACKEND_NOISE_SIM, nominal)
    reference = calibrate_noise_bounds(backend, backend.keygen(), trials=100).bounds
    _, beta = compute_beta(3, reference, window=backend.slot_count)

    report = _conformance(3, 0, injected=nominal.with_boot(10 * beta), reference=reference)

    assert report.violations > 0
    assert report.residual_violations > 0


def test_report_outputs(tmp_path):
    report = _conformance(3, 1)
    csv_path = tmp_path / 'report.csv'
    json_path = tmp_path / 'report.json'
    report.write_csv(str(csv_path))
    report.write_json(str(json_path))

    rows = read_report_csv(str(csv_path))
    assert [row['k'] for row in rows] == list(range(51))
    assert math.isnan(rows[0]['resid_k'])
    assert rows[50]['err_k'] == report.err_trajectory[50]
    assert rows[50]['bound_k'] == report.bound_curve[50]
    assert json.loads(json_path.read_text())["violations"] == 0
