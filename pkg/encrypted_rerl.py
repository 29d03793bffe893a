"""
Encrypted value iteration for the linear RERL fixed point.

The server only ever sees Enc(A_i), Enc(w), Enc(e_i) and Enc(Z_k) and applies

    Z_{k+1} = Boot( Enc(w) + sum_i Enc(e_i) * RotSum(Enc(A_i) * Enc(Z_k)) )

where RotSum adds every cyclic rotation of its input over the slot window so
each slot ends up holding the full row dot product.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from errors import CapacityError, InvalidInputError, NeedsBootstrapError, SynthesisFailure
from he_backend import Ciphertext, HeBackend, KeyMaterial, SecretKey
from mdp_core import DeterministicMdp
from rerl_core import LinearSystem, reconstruct_policy

logger = logging.getLogger(__name__)

STRATEGY_LITERAL = 'literal'
STRATEGY_TREE = 'tree'
STRATEGIES = (STRATEGY_LITERAL, STRATEGY_TREE)

# stream prefixes
STREAM_MODEL = 1
STREAM_STEP = 2
STREAM_STATE = 3

DESIRABILITY_FLOOR = 1e-12
MAX_BAD_FRACTION = 0.1
DESIRABILITY_CEILING = 1.05
CLIENT_CONSISTENCY_TOL = 0.1


@dataclass(frozen=True)
class EncryptedModel:
    enc_rows: Tuple[Ciphertext, ...]
    enc_w: Ciphertext
    enc_selectors: Tuple[Ciphertext, ...]
    size: int
    backend: str

    @property
    def slot_count(self) -> int:
        return self.enc_w.slot_count


@dataclass
class IterationTrace:
    wall_seconds: List[float] = field(default_factory=list)
    boot_seconds: List[float] = field(default_factory=list)
    snapshots: List[np.ndarray] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.wall_seconds)

    @property
    def boot_share(self) -> float:
        total = sum(self.wall_seconds)
        return sum(self.boot_seconds) / total if total > 0 else 0.0

    def timing_stats(self) -> dict:
        if not self.wall_seconds:
            return {'mean_s': 0.0, 'min_s': 0.0, 'max_s': 0.0}
        times = np.asarray(self.wall_seconds)
        return {'mean_s': float(times.mean()), 'min_s': float(times.min()), 'max_s': float(times.max())}

    def write_csv(self, path: str) -> None:
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(['iter', 'wall_seconds', 'boot_seconds'])
            for k, (wall, boot) in enumerate(zip(self.wall_seconds, self.boot_seconds), start=1):
                writer.writerow([k, f'{wall:.6f}', f'{boot:.6f}'])


@dataclass
class EncryptedRun:
    Z_T: Ciphertext
    trace: IterationTrace


@dataclass
class ClientResult:
    z: np.ndarray
    policy: np.ndarray
    clamped: int


def selector(i: int, slots: int) -> np.ndarray:
    e = np.zeros(slots)
    e[i] = 1.0
    return e


def encrypt_model(system: LinearSystem, backend: HeBackend, keys) -> EncryptedModel:
    """
    Encrypt the rows of A, the vector w and the S one-hot selectors.

    Vectors are zero-padded to the backend slot count.
    """
    S, n = system.size, backend.slot_count
    if S > n:
        raise CapacityError(f'S={S} states do not fit in {n} slots; raise the ring degree')
    rows = tuple(backend.encrypt(system.A[i], keys, stream=(STREAM_MODEL, 0, i)) for i in range(S))
    enc_w = backend.encrypt(system.w, keys, stream=(STREAM_MODEL, 1, 0))
    selectors = tuple(backend.encrypt(selector(i, n), keys, stream=(STREAM_MODEL, 2, i)) for i in range(S))
    logger.info('[Encrypt] model S=%d packed into %d slots (%s)', S, n, backend.name)
    return EncryptedModel(rows, enc_w, selectors, S, backend.name)


def encrypt_state(Z0, backend: HeBackend, keys, size: int) -> Ciphertext:
    Z0 = np.asarray(Z0, dtype=float)
    if Z0.shape != (size,):
        raise InvalidInputError(f'Z0 must have length {size}, got shape {Z0.shape}')
    if not np.all(Z0 > 0):
        raise InvalidInputError('Z0 must be strictly positive')
    return backend.encrypt(Z0, keys, stream=(STREAM_STATE, 0))


def rotation_sum(c: Ciphertext, backend: HeBackend, keys, strategy: str, stream: Tuple[int, ...]) -> Ciphertext:
    """
    Sum of all n cyclic rotations of c.

    literal: n rotate calls (r = 0..n-1) and n-1 additions.
    tree: log2(n) rotate-and-add doublings.
    """
    n = c.slot_count
    if strategy == STRATEGY_LITERAL:
        total = backend.rotate(c, 0, keys, stream=stream + (0,))
        for r in range(1, n):
            total = backend.add(total, backend.rotate(c, r, keys, stream=stream + (r,)))
        return total
    if strategy == STRATEGY_TREE:
        total, step = c, 1
        while step < n:
            total = backend.add(total, backend.rotate(total, step, keys, stream=stream + (step,)))
            step *= 2
        return total
    raise InvalidInputError(f'unknown rotation-sum strategy {strategy!r}; choose one of {", ".join(STRATEGIES)}')


def _row_term(model: EncryptedModel, Z: Ciphertext, i: int, backend: HeBackend, keys, strategy: str,
              k: int) -> Ciphertext:
    product = backend.mult(model.enc_rows[i], Z, keys, stream=(STREAM_STEP, k, i, 0))
    total = rotation_sum(product, backend, keys, strategy, (STREAM_STEP, k, i, 1))
    return backend.mult(model.enc_selectors[i], total, keys, stream=(STREAM_STEP, k, i, 2))


def encrypted_step(model: EncryptedModel, Z: Ciphertext, backend: HeBackend, keys, k: int = 0,
                   strategy: str = STRATEGY_TREE, workers: int = 1) -> Tuple[Ciphertext, float, float]:
    """
    One encrypted update Z_k -> Z_{k+1}.

    Row terms are independent and may run on a thread pool; they are always
    added in row order, so the result does not depend on workers.

    Returns:
        (Enc(Z_{k+1}), wall seconds, bootstrap seconds)
    """
    if Z.level < 2:
        raise NeedsBootstrapError(f'state ciphertext at level {Z.level}; the update consumes two levels')
    started = time.perf_counter()
    rows = range(model.size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            terms = list(pool.map(lambda i: _row_term(model, Z, i, backend, keys, strategy, k), rows))
    else:
        terms = [_row_term(model, Z, i, backend, keys, strategy, k) for i in rows]

    total = model.enc_w
    for term in terms:
        total = backend.add(total, term)

    boot_started = time.perf_counter()
    Z_next = backend.bootstrap(total, keys, stream=(STREAM_STEP, k, model.size, 3))
    finished = time.perf_counter()
    return Z_next, finished - started, finished - boot_started


def iterate_encrypted(model: EncryptedModel, Z0: Ciphertext, T: int, backend: HeBackend, keys,
                      strategy: str = STRATEGY_TREE, workers: int = 1,
                      secret: Optional[SecretKey] = None) -> EncryptedRun:
    """
    Run T encrypted updates starting from Enc(Z0).

    With a secret key (test mode only) the trace also holds the decrypted
    iterate after every step, Z0 first.
    """
    if T < 1:
        raise InvalidInputError(f'T must be at least 1, got {T}')
    trace = IterationTrace()
    if secret is not None:
        trace.snapshots.append(backend.decrypt(Z0, secret)[:model.size])
    Z = Z0
    for k in range(T):
        Z, wall, boot = encrypted_step(model, Z, backend, keys, k, strategy, workers)
        trace.wall_seconds.append(wall)
        trace.boot_seconds.append(boot)
        if secret is not None:
            trace.snapshots.append(backend.decrypt(Z, secret)[:model.size])
        logger.debug('[Iterate] step %d/%d %.3fs (boot %.3fs)', k + 1, T, wall, boot)
    logger.info('[Iterate] %d steps, mean %.3fs/step, bootstrap share %.0f%%', T,
                trace.timing_stats()['mean_s'], 100 * trace.boot_share)
    return EncryptedRun(Z, trace)


def run_encrypted_vi(model: EncryptedModel, Z0, T: int, backend: HeBackend, keys: KeyMaterial,
                     strategy: str = STRATEGY_TREE, workers: int = 1, test_mode: bool = False) -> EncryptedRun:
    """Encrypt Z0 and iterate; the secret key is used only when test_mode is set."""
    evaluation = keys.evaluation if isinstance(keys, KeyMaterial) else keys
    secret = keys.secret if test_mode and isinstance(keys, KeyMaterial) else None
    Z0_ct = encrypt_state(Z0, backend, evaluation, model.size)
    return iterate_encrypted(model, Z0_ct, T, backend, evaluation, strategy, workers, secret)


def clamp_desirability(z: np.ndarray, floor: float = DESIRABILITY_FLOOR) -> Tuple[np.ndarray, int]:
    """Raise non-positive entries to floor; returns the clamped vector and how many were raised."""
    z = np.array(z, dtype=float)
    low = z <= 0
    z[low] = floor
    return z, int(low.sum())


def client_finish(Z_T: Ciphertext, backend: HeBackend, secret: SecretKey, mdp: DeterministicMdp, lam: float,
                  floor: float = DESIRABILITY_FLOOR) -> ClientResult:
    """
    Decrypt the final iterate and reconstruct the policy.

    Raises SynthesisFailure when more than 10% of the entries are
    non-positive or above the desirability range, which means noise or
    tampering destroyed the result.
    """
    S = mdp.num_nonabsorbing
    z = np.asarray(backend.decrypt(Z_T, secret)[:S], dtype=float)
    finite = np.isfinite(z)
    bad = int(np.sum(~finite | (z <= 0) | (z > DESIRABILITY_CEILING)))
    if bad > MAX_BAD_FRACTION * S:
        raise SynthesisFailure(f'{bad} of {S} decrypted desirability entries are out of range')
    z, clamped = clamp_desirability(np.minimum(np.where(finite, z, 0.0), 1.0), floor)
    tolerance = CLIENT_CONSISTENCY_TOL
    if clamped:
        # clamped rows no longer solve the system; only normalization is meaningful
        logger.warning('[Client] clamped %d non-positive desirability entries to %g', clamped, floor)
        tolerance = np.inf
    policy = reconstruct_policy(mdp, z, lam, consistency_tol=tolerance)
    return ClientResult(z, policy, clamped)
