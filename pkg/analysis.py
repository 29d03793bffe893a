"""
Error metrics and convergence bounds for noisy (encrypted) value iteration.

With per-operation error bounds b_enc, b_mult, b_rot, b_boot, a rotation
window of R slots and S rows, one encrypted update deviates from the exact
update A Z + w by at most

    beta = R (b_mult + b_rot) + S b_mult + b_enc + b_boot

in sup-norm, and the iterates satisfy

    ||Z~_k - Z*|| <= c (alpha^k (||Z_0 - Z*|| + beta0) + beta / (1 - alpha))

where alpha is the largest row sum of A and beta0 = b_enc.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import InvalidInputError
from he_backend import NoiseBounds
from rerl_core import LinearSystem, contractivity_check, solve_direct

logger = logging.getLogger(__name__)

# relative tolerance for float roundoff when comparing against bounds
FLOAT_SLACK = 1e-12


@dataclass(frozen=True)
class BoundParameters:
    beta0: float
    beta: float
    alpha: float
    z0_gap: float
    c: float = 1.0

    def __post_init__(self):
        if not 0 <= self.alpha < 1:
            raise InvalidInputError(f'alpha must lie in [0, 1), got {self.alpha}')
        if self.beta0 < 0 or self.beta < 0 or self.z0_gap < 0:
            raise InvalidInputError('beta0, beta and the initial gap must be non-negative')
        if self.c < 1:
            raise InvalidInputError(f'c must be at least 1, got {self.c}')


def compute_beta(size: int, bounds: NoiseBounds, window: Optional[int] = None) -> Tuple[float, float]:
    """
    Per-step error budget of one encrypted update.

    Args:
        size: number of rows S
        bounds: per-operation error bounds
        window: rotation window R; defaults to S

    Returns:
        (beta0, beta)
    """
    if size < 1:
        raise InvalidInputError('size must be positive')
    R = size if window is None else int(window)
    beta = R * (bounds.b_mult + bounds.b_rot) + size * bounds.b_mult + bounds.b_enc + bounds.b_boot
    return bounds.b_enc, beta


def bound_parameters(system: LinearSystem, bounds: NoiseBounds, Z0, window: Optional[int] = None,
                     z_star: Optional[np.ndarray] = None) -> BoundParameters:
    alpha = contractivity_check(system).max_row_sum
    if alpha >= 1:
        raise InvalidInputError(f'the system is not contractive (max row sum {alpha:.4f})')
    z_star = solve_direct(system) if z_star is None else z_star
    beta0, beta = compute_beta(system.size, bounds, window)
    gap = float(np.max(np.abs(np.asarray(Z0, dtype=float) - z_star)))
    return BoundParameters(beta0, beta, alpha, gap)


def theorem_bound(params: BoundParameters, k: int) -> float:
    """Sup-norm error bound after k noisy updates."""
    if k < 0:
        raise InvalidInputError('k must be non-negative')
    return params.c * (params.alpha ** k * (params.z0_gap + params.beta0) + params.beta / (1 - params.alpha))


def limsup_bound(params: BoundParameters) -> float:
    return params.c * params.beta / (1 - params.alpha)


def err_metric(z_tilde, z_star) -> float:
    """Relative mean absolute error: mean|z~ - z*| / mean(z*)."""
    z_tilde = np.asarray(z_tilde, dtype=float)
    z_star = np.asarray(z_star, dtype=float)
    if z_tilde.shape != z_star.shape:
        raise InvalidInputError(f'length mismatch {z_tilde.shape} vs {z_star.shape}')
    scale = float(np.mean(z_star))
    if scale == 0:
        raise InvalidInputError('mean of the reference vector is zero')
    return float(np.mean(np.abs(z_tilde - z_star)) / scale)


def spectral_radius(A: np.ndarray) -> float:
    A = np.asarray(A, dtype=float)
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0


def contraction_violations(trajectory: Sequence[np.ndarray], z_star: np.ndarray, alpha: float,
                           slack: float = 1e-12) -> List[int]:
    """Steps k where ||Z_{k+1} - Z*|| exceeds alpha ||Z_k - Z*|| in exact iteration."""
    errors = [np.max(np.abs(np.asarray(z) - z_star)) for z in trajectory]
    return [k for k in range(len(errors) - 1) if errors[k + 1] > alpha * errors[k] + slack]


@dataclass
class ErrorReport:
    err_trajectory: List[float]
    inf_errors: List[float]
    residuals: List[float]
    bound_curve: List[float]
    params: BoundParameters
    bound_violations: int = 0
    residual_violations: int = 0
    spectral_radius: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def violations(self) -> int:
        return self.bound_violations + self.residual_violations

    @property
    def limsup(self) -> float:
        return limsup_bound(self.params)

    def summary(self) -> dict:
        summary = {
            'beta0': self.params.beta0,
            'beta': self.params.beta,
            'alpha': self.params.alpha,
            'c': self.params.c,
            'z0_gap': self.params.z0_gap,
            'limsup_bound': self.limsup,
            'spectral_radius': self.spectral_radius,
            'violations': self.violations,
            'bound_violations': self.bound_violations,
            'residual_violations': self.residual_violations,
            'err_final': self.err_trajectory[-1] if self.err_trajectory else None,
        }
        summary.update(self.extras)
        return summary

    def write_csv(self, path: str) -> None:
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(['k', 'err_k', 'resid_k', 'bound_k'])
            for k, (err, bound) in enumerate(zip(self.err_trajectory, self.bound_curve)):
                resid = self.residuals[k - 1] if k >= 1 else math.nan
                writer.writerow([k, repr(err), repr(resid), repr(bound)])

    def write_json(self, path: str) -> None:
        with open(path, 'w') as handle:
            json.dump(self.summary(), handle, indent=2)


def read_report_csv(path: str) -> List[dict]:
    with open(path, newline='') as handle:
        return [{key: (int(value) if key == 'k' else float(value)) for key, value in row.items()}
                for row in csv.DictReader(handle)]


def verify_run(snapshots: Sequence[np.ndarray], system: LinearSystem, params: BoundParameters,
               z_star: Optional[np.ndarray] = None) -> ErrorReport:
    """
    Check a decrypted trajectory Z~_0..Z~_T against the bound and the per-step budget.

    A bound violation is a step k with ||Z~_k - Z*|| above bound(k); a residual
    violation is a step with ||Z~_k - (A Z~_{k-1} + w)|| > beta.
    """
    if not snapshots:
        raise InvalidInputError('verify_run needs at least the initial snapshot')
    z_star = solve_direct(system) if z_star is None else np.asarray(z_star, dtype=float)
    err_trajectory, inf_errors, residuals, bound_curve = [], [], [], []
    bound_violations = residual_violations = 0
    for k, z in enumerate(snapshots):
        z = np.asarray(z, dtype=float)
        err_trajectory.append(err_metric(z, z_star))
        inf_error = float(np.max(np.abs(z - z_star)))
        inf_errors.append(inf_error)
        bound = theorem_bound(params, k)
        bound_curve.append(bound)
        if inf_error > bound + FLOAT_SLACK * max(1.0, bound):
            bound_violations += 1
        if k >= 1:
            previous = np.asarray(snapshots[k - 1], dtype=float)
            residual = float(np.max(np.abs(z - (system.A @ previous + system.w))))
            residuals.append(residual)
            if residual > params.beta + FLOAT_SLACK * max(1.0, params.beta):
                residual_violations += 1
    if bound_violations or residual_violations:
        logger.warning('[Verify] %d bound and %d residual violations', bound_violations, residual_violations)
    return ErrorReport(err_trajectory, inf_errors, residuals, bound_curve, params,
                       bound_violations, residual_violations, spectral_radius(system.A))
