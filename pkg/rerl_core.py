"""
Plaintext relative-entropy-regularized control on deterministic MDPs.

The exponential change of variable z = exp(-V/lambda) turns the regularized
Bellman equation into the linear fixed point Z = A Z + w.  This module builds
that system, solves it (iteratively and directly), maps desirability back to
values and policies, and provides the two plaintext references the encrypted
pipeline is checked against.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Set, Tuple

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.special import logsumexp

from errors import ConsistencyError, InvalidInputError, NumericError, OracleFailure
from mdp_core import DeterministicMdp, validate_assumptions

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 50
DEFAULT_TOL = 1e-10
CONSISTENCY_TOL = 1e-3


@dataclass(frozen=True)
class LinearSystem:
    """Z = A Z + w over the non-absorbing states (absorbing desirability is 1)."""
    A: np.ndarray
    w: np.ndarray
    lam: float
    state_order: Tuple[int, ...] = ()

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        w = np.array(self.w, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or w.shape != (A.shape[0],):
            raise InvalidInputError(f'incompatible system shapes A{A.shape} w{w.shape}')
        A.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'w', w)
        if not self.state_order:
            object.__setattr__(self, 'state_order', tuple(range(A.shape[0])))

    @property
    def size(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class ContractivityReport:
    max_row_sum: float
    contractive: bool


@dataclass
class IterationResult:
    Z: np.ndarray
    iterations: int
    converged: bool
    trajectory: List[np.ndarray] = field(default_factory=list)


@dataclass
class MinViResult:
    V: np.ndarray
    greedy: np.ndarray
    iterations: int


def _require_positive_lambda(lam: float) -> float:
    lam = float(lam)
    if not np.isfinite(lam) or lam <= 0:
        raise InvalidInputError(f'lambda must be positive, got {lam}')
    return lam


def _weights(mdp: DeterministicMdp, lam: float) -> np.ndarray:
    return mdp.default_policy * np.exp(-mdp.cost / lam)


def build_linear_system(mdp: DeterministicMdp, lam: float) -> LinearSystem:
    """
    Assemble A and w from an MDP.

    Args:
        mdp: MDP satisfying the standing assumptions
        lam: regularization weight, > 0

    Returns:
        LinearSystem with A[i][j] = sum of b(u|i) exp(-C(i,u)/lam) over actions
        with F(i,u)=j, and w[i] the same sum over actions reaching x_abs
    """
    lam = _require_positive_lambda(lam)
    report = validate_assumptions(mdp)
    if not report.passed:
        names = ', '.join(f'{c.name} ({c.detail})' for c in report.failures)
        raise InvalidInputError(f'MDP violates standing assumptions: {names}')

    S = mdp.num_nonabsorbing
    weights = _weights(mdp, lam)[:S]
    targets = mdp.transition[:S]

    A = np.zeros((S, S))
    w = np.zeros(S)
    to_abs = targets == mdp.absorbing
    rows = np.broadcast_to(np.arange(S)[:, None], targets.shape)
    np.add.at(A, (rows[~to_abs], targets[~to_abs]), weights[~to_abs])
    np.add.at(w, rows[to_abs], weights[to_abs])

    logger.debug('[RERL] built system S=%d lambda=%g max row sum %.4f', S, lam, A.sum(axis=1).max())
    return LinearSystem(A, w, lam)


def contractivity_check(system: LinearSystem) -> ContractivityReport:
    alpha = float(system.A.sum(axis=1).max()) if system.size else 0.0
    return ContractivityReport(alpha, alpha < 1.0)


def _check_start(Z0: Optional[np.ndarray], size: int) -> np.ndarray:
    if Z0 is None:
        return np.ones(size)
    Z0 = np.asarray(Z0, dtype=float)
    if Z0.shape != (size,):
        raise InvalidInputError(f'Z0 must have length {size}, got shape {Z0.shape}')
    if not np.all(Z0 > 0):
        raise InvalidInputError('Z0 must be strictly positive')
    return Z0.copy()


def value_iterate(system: LinearSystem, Z0: Optional[np.ndarray] = None, max_iter: int = DEFAULT_MAX_ITER,
                  tol: float = DEFAULT_TOL, record: bool = False) -> IterationResult:
    """
    Iterate Z <- A Z + w until successive iterates differ by less than tol.

    The reported iteration count excludes the final confirming update, so a
    system that reaches its fixed point after one update reports 1.

    Args:
        system: linear system
        Z0: strictly positive start, defaults to the all-ones vector
        max_iter: iteration cap
        tol: sup-norm stopping tolerance
        record: keep every iterate (Z0 first) in the result trajectory

    Returns:
        IterationResult
    """
    Z = _check_start(Z0, system.size)
    trajectory = [Z.copy()] if record else []
    for k in range(max_iter):
        Z_next = system.A @ Z + system.w
        if record:
            trajectory.append(Z_next.copy())
        delta = np.max(np.abs(Z_next - Z))
        Z = Z_next
        if delta < tol:
            return IterationResult(Z, k, True, trajectory)
    logger.info('[RERL] value iteration hit the cap of %d iterations', max_iter)
    return IterationResult(Z, max_iter, False, trajectory)


def solve_direct(system: LinearSystem) -> np.ndarray:
    """Solve (I - A) Z = w by LU factorization."""
    S = system.size
    lu, piv = lu_factor(np.eye(S) - system.A, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if pivots.min() <= np.finfo(float).eps * max(1.0, pivots.max()):
        raise NumericError('I - A is singular; the system has no unique solution')
    Z = lu_solve((lu, piv), system.w)
    residual = np.max(np.abs(Z - (system.A @ Z + system.w)))
    if not np.all(np.isfinite(Z)) or residual > 1e-8 * max(1.0, np.max(np.abs(Z))):
        raise NumericError(f'direct solve is ill-conditioned (residual {residual:.3e})')
    return Z


def desirability_to_value(z: np.ndarray, lam: float) -> np.ndarray:
    """V = -lam * ln z over the non-absorbing states, with V(x_abs) = 0 appended."""
    lam = _require_positive_lambda(lam)
    z = np.asarray(z, dtype=float)
    if not np.all(z > 0):
        raise InvalidInputError('desirability must be strictly positive')
    return np.append(-lam * np.log(z), 0.0)


def reconstruct_policy(mdp: DeterministicMdp, z: np.ndarray, lam: float,
                       consistency_tol: float = CONSISTENCY_TOL) -> np.ndarray:
    """
    Optimal stochastic policy pi(u|x) = b(u|x) exp(-C(x,u)/lam) z(F(x,u)) / z(x).

    Computed in the log domain and renormalized per row.

    Args:
        mdp: the MDP z was computed for
        z: desirability of the non-absorbing states
        lam: regularization weight
        consistency_tol: largest tolerated deviation of an unnormalized row
            sum from 1

    Returns:
        array of shape (S+1, |U|); rows sum to 1
    """
    lam = _require_positive_lambda(lam)
    z = np.asarray(z, dtype=float)
    if z.shape != (mdp.num_nonabsorbing,):
        raise InvalidInputError(f'z must have length {mdp.num_nonabsorbing}, got shape {z.shape}')
    if not np.all(z > 0):
        raise InvalidInputError('desirability must be strictly positive')

    log_z = np.log(np.append(z, 1.0))
    with np.errstate(divide='ignore'):
        log_b = np.log(mdp.default_policy)
    log_numer = log_b - mdp.cost / lam + log_z[mdp.transition]
    log_rows = logsumexp(log_numer, axis=1)

    deviation = np.abs(np.exp(log_rows - log_z) - 1.0)
    worst = int(np.argmax(deviation))
    if deviation[worst] > consistency_tol:
        raise ConsistencyError(
            f'z does not solve the system: row sum at state {worst} deviates by {deviation[worst]:.3e}')
    return np.exp(log_numer - log_rows[:, None])


def greedy_actions(policy: np.ndarray) -> np.ndarray:
    """Most likely action per state; ties go to the lowest action index."""
    return np.argmax(policy, axis=1)


def bellman_fixed_point_oracle(mdp: DeterministicMdp, lam: float, tol: float = 1e-12,
                               max_iter: int = 100000) -> np.ndarray:
    """
    Solve the soft-min Bellman equation directly in value space.

    V(x) = -lam * log sum_u b(u|x) exp(-(C(x,u) + V(F(x,u)))/lam), V(x_abs) = 0.
    Independent of the linear system, so it cross-checks the whole z pipeline.

    Returns:
        values of all S+1 states
    """
    lam = _require_positive_lambda(lam)
    S = mdp.num_nonabsorbing
    b = mdp.default_policy[:S]
    V = np.zeros(mdp.num_states)
    for _ in range(max_iter):
        rho = mdp.cost[:S] + V[mdp.transition[:S]]
        V_next = V.copy()
        V_next[:S] = -lam * logsumexp(-rho / lam, b=b, axis=1)
        if not np.all(np.isfinite(V_next)):
            raise OracleFailure('soft Bellman iteration produced non-finite values')
        delta = np.max(np.abs(V_next - V))
        V = V_next
        if delta < tol:
            return V
    raise OracleFailure(f'soft Bellman iteration did not converge within {max_iter} iterations')


def standard_min_vi(mdp: DeterministicMdp, tol: float = 1e-12, max_iter: int = 10000) -> MinViResult:
    """Unregularized value iteration V(x) = min_u [C(x,u) + V(F(x,u))]."""
    S = mdp.num_nonabsorbing
    V = np.zeros(mdp.num_states)
    for k in range(max_iter):
        q = mdp.cost + V[mdp.transition]
        V_next = q.min(axis=1)
        V_next[mdp.absorbing] = 0.0
        delta = np.max(np.abs(V_next - V))
        V = V_next
        if delta < tol:
            greedy = np.argmin(mdp.cost + V[mdp.transition], axis=1)
            return MinViResult(V, greedy, k + 1)
    raise OracleFailure(f'min value iteration did not converge within {max_iter} iterations (S={S})')


def min_vi_minimizers(mdp: DeterministicMdp, V: np.ndarray, atol: float = 1e-9) -> List[Set[int]]:
    """Set of cost-minimizing actions per state under values V."""
    q = mdp.cost + np.asarray(V)[mdp.transition]
    best = q.min(axis=1, keepdims=True)
    return [set(np.flatnonzero(row <= b + atol).tolist()) for row, b in zip(q, best[:, 0])]


def rotate_vector(x: np.ndarray, r: int) -> np.ndarray:
    """Cyclic left shift: rotate([1,2,3,4,5], 2) == [3,4,5,1,2]."""
    return np.roll(np.asarray(x), -int(r))


def encryption_friendly_iterate(system: LinearSystem, Z0: np.ndarray, T: int,
                                pad_to: Optional[int] = None) -> np.ndarray:
    """
    Plaintext replica of the encrypted update, using only slot-wise products,
    rotations and additions.

    Each row dot product is formed by multiplying A_i with Z slot-wise and
    summing every cyclic rotation of the product over the padded window, which
    leaves the full sum in every slot; the selector e_i then keeps slot i.

    Args:
        system: linear system
        Z0: start vector
        T: number of updates
        pad_to: slot window (>= S); defaults to S

    Returns:
        Z after T updates, length S
    """
    S = system.size
    n = S if pad_to is None else int(pad_to)
    if n < S:
        raise InvalidInputError(f'pad_to ({n}) must be at least S ({S})')
    if T < 0:
        raise InvalidInputError('T must be non-negative')
    Z = np.zeros(n)
    Z[:S] = _check_start(Z0, S)
    A = np.zeros((n, n))
    A[:S, :S] = system.A
    w = np.zeros(n)
    w[:S] = system.w

    for _ in range(T):
        Z_next = w.copy()
        for i in range(S):
            product = A[i] * Z
            total = sum(rotate_vector(product, r) for r in range(n))
            selector = np.zeros(n)
            selector[i] = 1.0
            Z_next = Z_next + selector * total
        Z = Z_next
    return Z[:S]
