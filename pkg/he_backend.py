"""
Approximate homomorphic encryption interface.

Two interchangeable engines implement HeBackend:
    - NoiseSimBackend: plaintext float vectors plus injected bounded noise,
      with the level bookkeeping of a real scheme
    - ToyCkksBackend (toy_ckks.py): a small but genuine ring-LWE CKKS

Every randomized operation takes a ``stream`` key (a tuple of non-negative
ints); its randomness comes from np.random.default_rng([seed, tag, *stream]).
Identical keys give identical ciphertexts in every process.

SECURITY: neither engine is secure. ToyCkks uses a tiny ring, and bootstrap
is a recryption oracle holding a copy of the secret key.
"""

from __future__ import annotations

import itertools
import logging
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigurationError, DecryptionError, InvalidInputError, NeedsBootstrapError

logger = logging.getLogger(__name__)

BACKEND_NOISE_SIM = 'noise-sim'
BACKEND_TOY_CKKS = 'toy-ckks'
BACKENDS = (BACKEND_NOISE_SIM, BACKEND_TOY_CKKS)

SECURITY_BANNER = ('[Security] demonstration build: toy ring dimension and a recryption oracle '
                   'that holds the secret key; ciphertexts are NOT confidential')

# stream tags
TAG_KEYGEN = 1
TAG_ENC = 2
TAG_MULT = 3
TAG_ROT = 4
TAG_BOOT = 5
TAG_AUTO = 99

Stream = Optional[Sequence[int]]


@dataclass(frozen=True)
class BackendParams:
    """
    Encryption parameters.

    The modulus chain is Q_l = q0 * scale^l with q0 = 2^(scale_bits + base_margin_bits),
    so rescaling divides exactly by the scale and every ciphertext keeps scale 2^scale_bits.
    """
    ring_degree: int = 128
    scale_bits: int = 28
    base_margin_bits: int = 10
    levels: int = 2
    noise_stddev: float = 3.2
    seed: int = 0
    message_bound: float = 2.0
    boot_noise_scale: float = 1024.0

    def validate(self) -> None:
        N = self.ring_degree
        if N < 8 or N & (N - 1):
            raise ConfigurationError(f'ring degree must be a power of two >= 8, got {N}')
        if not 10 <= self.scale_bits <= 60:
            raise ConfigurationError(f'scale_bits must be in [10, 60], got {self.scale_bits}')
        if self.base_margin_bits < 1 or self.base_bits > 63:
            raise ConfigurationError(f'base modulus must fit in 63 bits, got {self.base_bits}')
        if self.levels < 2:
            raise ConfigurationError('the modulus chain must support at least 2 rescalings')
        if self.noise_stddev < 0 or self.message_bound <= 0 or self.boot_noise_scale < 0:
            raise ConfigurationError('noise_stddev, message_bound and boot_noise_scale must be non-negative')
        if not 0 <= self.seed < 2 ** 63:
            raise ConfigurationError(f'seed must be a non-negative 63-bit integer, got {self.seed}')

    @property
    def slot_count(self) -> int:
        return self.ring_degree // 2

    @property
    def scale(self) -> float:
        return float(2 ** self.scale_bits)

    @property
    def base_bits(self) -> int:
        return self.scale_bits + self.base_margin_bits

    @property
    def modulus_chain(self) -> Tuple[int, ...]:
        """The RNS-style factors q0, Delta, ..., Delta (levels + 1 entries)."""
        return (2 ** self.base_bits,) + (2 ** self.scale_bits,) * self.levels

    def modulus_at(self, level: int) -> int:
        return 2 ** (self.base_bits + self.scale_bits * level)

    def unit_noise(self) -> float:
        """N / scale, the natural size of one fresh-noise unit in slot space."""
        return self.ring_degree / self.scale

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'BackendParams':
        known = {f: values[f] for f in cls.__dataclass_fields__ if f in values}
        return cls(**known)


@dataclass(frozen=True)
class NoiseBounds:
    """Per-operation sup-norm error bounds (or injection magnitudes)."""
    b_enc: float
    b_mult: float
    b_rot: float
    b_boot: float

    def __post_init__(self):
        for name, value in self.to_dict().items():
            if not np.isfinite(value) or value < 0:
                raise InvalidInputError(f'{name} must be finite and non-negative, got {value}')

    @classmethod
    def zero(cls) -> 'NoiseBounds':
        return cls(0.0, 0.0, 0.0, 0.0)

    def scaled(self, factor: float) -> 'NoiseBounds':
        return NoiseBounds(*(factor * v for v in self.to_dict().values()))

    def with_boot(self, b_boot: float) -> 'NoiseBounds':
        return NoiseBounds(self.b_enc, self.b_mult, self.b_rot, b_boot)

    def to_dict(self) -> Dict[str, float]:
        return {'b_enc': self.b_enc, 'b_mult': self.b_mult, 'b_rot': self.b_rot, 'b_boot': self.b_boot}


def default_injected_bounds(params: BackendParams) -> NoiseBounds:
    unit = params.unit_noise()
    return NoiseBounds(unit, unit, unit, params.boot_noise_scale * unit)


@dataclass(frozen=True)
class Ciphertext:
    payload: Any = field(repr=False, compare=False)
    level: int
    scale: float
    slot_count: int
    backend: str


@dataclass(frozen=True)
class SecretKey:
    backend: str
    params: BackendParams
    data: Any = field(repr=False, compare=False)


@dataclass(frozen=True)
class EvaluationKeys:
    """Everything the server may hold: public, relinearization, rotation keys and the recryption token."""
    backend: str
    params: BackendParams
    public_key: Any = field(default=None, repr=False, compare=False)
    relin_key: Any = field(default=None, repr=False, compare=False)
    rotation_keys: Dict[int, Any] = field(default_factory=dict, repr=False, compare=False)
    recryption_token: bytes = field(default=b'', repr=False, compare=False)

    @property
    def rotation_steps(self) -> Tuple[int, ...]:
        return tuple(sorted(self.rotation_keys))


@dataclass(frozen=True)
class KeyMaterial:
    secret: SecretKey
    evaluation: EvaluationKeys


def power_of_two_steps(slot_count: int) -> Tuple[int, ...]:
    steps, step = [], 1
    while step < slot_count:
        steps.append(step)
        step *= 2
    return tuple(steps)


def _evaluation(keys) -> EvaluationKeys:
    return keys.evaluation if isinstance(keys, KeyMaterial) else keys


class HeBackend(ABC):
    """Common contract of the encryption engines."""

    name = ''

    def __init__(self, params: BackendParams):
        params.validate()
        self.params = params
        self._auto_stream = itertools.count()

    @property
    def slot_count(self) -> int:
        return self.params.slot_count

    def rng(self, tag: int, stream: Stream) -> np.random.Generator:
        if stream is None:
            stream = (TAG_AUTO, next(self._auto_stream))
        return np.random.default_rng([self.params.seed, tag, *(int(s) for s in stream)])

    def check_message(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise InvalidInputError(f'plaintext must be a vector, got shape {x.shape}')
        if len(x) > self.slot_count:
            raise InvalidInputError(f'vector of length {len(x)} exceeds {self.slot_count} slots')
        if not np.all(np.isfinite(x)):
            raise InvalidInputError('plaintext contains non-finite values')
        if len(x) and np.max(np.abs(x)) > self.params.message_bound:
            raise InvalidInputError(
                f'plaintext magnitude {np.max(np.abs(x)):.3g} exceeds bound {self.params.message_bound}')
        padded = np.zeros(self.slot_count)
        padded[:len(x)] = x
        return padded

    def check_ciphertext(self, c: Ciphertext) -> None:
        if not isinstance(c, Ciphertext) or c.backend != self.name:
            raise InvalidInputError(f'{self.name} backend cannot operate on {getattr(c, "backend", type(c))} data')
        if c.slot_count != self.slot_count:
            raise InvalidInputError(f'slot count mismatch: {c.slot_count} != {self.slot_count}')

    def check_secret(self, secret: SecretKey) -> None:
        if not isinstance(secret, SecretKey) or secret.backend != self.name:
            raise DecryptionError('decryption needs the secret key of this backend')

    def check_rotation(self, r: int) -> int:
        r = int(r)
        if not 0 <= r < self.slot_count:
            raise InvalidInputError(f'rotation {r} outside [0, {self.slot_count})')
        return r

    def check_mult_levels(self, c1: Ciphertext, c2: Ciphertext) -> int:
        level = min(c1.level, c2.level)
        if level < 1:
            raise NeedsBootstrapError(f'multiplication needs level >= 1, operands are at {c1.level} and {c2.level}')
        return level

    @abstractmethod
    def keygen(self) -> KeyMaterial:
        pass

    @abstractmethod
    def encrypt(self, x, keys, stream: Stream = None) -> Ciphertext:
        pass

    @abstractmethod
    def decrypt(self, c: Ciphertext, secret: SecretKey) -> np.ndarray:
        pass

    @abstractmethod
    def add(self, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
        pass

    @abstractmethod
    def mult(self, c1: Ciphertext, c2: Ciphertext, keys, stream: Stream = None) -> Ciphertext:
        pass

    @abstractmethod
    def rotate(self, c: Ciphertext, r: int, keys, stream: Stream = None) -> Ciphertext:
        pass

    @abstractmethod
    def bootstrap(self, c: Ciphertext, keys, stream: Stream = None) -> Ciphertext:
        pass


class NoiseSimBackend(HeBackend):
    """
    Plaintext vectors with bounded uniform noise injected per operation.

    enc, mult, rotate (r != 0) and bootstrap add noise uniform in
    [-b, +b] per slot; add is exact and rotate(c, 0) is an exact copy.
    """

    name = BACKEND_NOISE_SIM

    def __init__(self, params: BackendParams, injected: Optional[NoiseBounds] = None):
        super().__init__(params)
        self.injected = injected if injected is not None else default_injected_bounds(params)

    def _noisy(self, values: np.ndarray, bound: float, tag: int, stream: Stream) -> np.ndarray:
        if bound <= 0:
            return values.copy()
        return values + self.rng(tag, stream).uniform(-bound, bound, size=values.shape)

    def _wrap(self, payload: np.ndarray, level: int) -> Ciphertext:
        payload = np.asarray(payload, dtype=float)
        payload.setflags(write=False)
        return Ciphertext(payload, level, self.params.scale, self.slot_count, self.name)

    def keygen(self) -> KeyMaterial:
        steps = power_of_two_steps(self.slot_count)
        evaluation = EvaluationKeys(self.name, self.params, rotation_keys={s: None for s in steps})
        return KeyMaterial(SecretKey(self.name, self.params, None), evaluation)

    def encrypt(self, x, keys, stream: Stream = None) -> Ciphertext:
        padded = self.check_message(x)
        return self._wrap(self._noisy(padded, self.injected.b_enc, TAG_ENC, stream), self.params.levels)

    def decrypt(self, c: Ciphertext, secret: SecretKey) -> np.ndarray:
        self.check_ciphertext(c)
        self.check_secret(secret)
        if not 0 <= c.level <= self.params.levels:
            raise DecryptionError(f'ciphertext level {c.level} outside the modulus chain')
        return np.array(c.payload, dtype=float)

    def add(self, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
        self.check_ciphertext(c1)
        self.check_ciphertext(c2)
        return self._wrap(c1.payload + c2.payload, min(c1.level, c2.level))

    def mult(self, c1: Ciphertext, c2: Ciphertext, keys, stream: Stream = None) -> Ciphertext:
        self.check_ciphertext(c1)
        self.check_ciphertext(c2)
        level = self.check_mult_levels(c1, c2)
        product = self._noisy(c1.payload * c2.payload, self.injected.b_mult, TAG_MULT, stream)
        return self._wrap(product, level - 1)

    def rotate(self, c: Ciphertext, r: int, keys, stream: Stream = None) -> Ciphertext:
        self.check_ciphertext(c)
        r = self.check_rotation(r)
        if r == 0:
            return c
        rotated = self._noisy(np.roll(c.payload, -r), self.injected.b_rot, TAG_ROT, stream)
        return self._wrap(rotated, c.level)

    def bootstrap(self, c: Ciphertext, keys, stream: Stream = None) -> Ciphertext:
        self.check_ciphertext(c)
        refreshed = self._noisy(np.asarray(c.payload), self.injected.b_boot, TAG_BOOT, stream)
        return self._wrap(refreshed, self.params.levels)


class CountingBackend(HeBackend):
    """Delegating wrapper that counts homomorphic operations by name."""

    def __init__(self, inner: HeBackend):
        self.inner = inner
        self.params = inner.params
        self.name = inner.name
        self.counts: Counter = Counter()

    def reset(self) -> None:
        self.counts.clear()

    def keygen(self) -> KeyMaterial:
        return self.inner.keygen()

    def encrypt(self, x, keys, stream: Stream = None) -> Ciphertext:
        self.counts['encrypt'] += 1
        return self.inner.encrypt(x, keys, stream)

    def decrypt(self, c: Ciphertext, secret: SecretKey) -> np.ndarray:
        self.counts['decrypt'] += 1
        return self.inner.decrypt(c, secret)

    def add(self, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
        self.counts['add'] += 1
        return self.inner.add(c1, c2)

    def mult(self, c1: Ciphertext, c2: Ciphertext, keys, stream: Stream = None) -> Ciphertext:
        self.counts['mult'] += 1
        return self.inner.mult(c1, c2, keys, stream)

    def rotate(self, c: Ciphertext, r: int, keys, stream: Stream = None) -> Ciphertext:
        self.counts['rotate'] += 1
        return self.inner.rotate(c, r, keys, stream)

    def bootstrap(self, c: Ciphertext, keys, stream: Stream = None) -> Ciphertext:
        self.counts['bootstrap'] += 1
        return self.inner.bootstrap(c, keys, stream)


def make_backend(params: BackendParams, kind: str = BACKEND_TOY_CKKS,
                 injected: Optional[NoiseBounds] = None) -> HeBackend:
    if kind == BACKEND_NOISE_SIM:
        return NoiseSimBackend(params, injected)
    if kind == BACKEND_TOY_CKKS:
        from toy_ckks import ToyCkksBackend
        return ToyCkksBackend(params)
    raise ConfigurationError(f'unknown backend {kind!r}; choose one of {", ".join(BACKENDS)}')


@dataclass(frozen=True)
class CalibrationResult:
    bounds: NoiseBounds
    observed: NoiseBounds
    trials: int
    safety: float


CALIBRATION_STREAM = 0xCA1


def calibrate_noise_bounds(backend: HeBackend, keys: KeyMaterial, trials: int = 100,
                           safety: float = 2.0) -> CalibrationResult:
    """
    Measure the worst per-operation error over random unit-box vectors.

    Args:
        backend: engine to measure
        keys: full key material (decryption is needed)
        trials: number of random trials, >= 100
        safety: multiplier applied to the observed maxima

    Returns:
        CalibrationResult with bounds = safety * observed maxima
    """
    if trials < 100:
        raise InvalidInputError(f'calibration needs at least 100 trials, got {trials}')
    n = backend.slot_count
    evaluation, secret = keys.evaluation, keys.secret
    worst = dict(b_enc=0.0, b_mult=0.0, b_rot=0.0, b_boot=0.0)

    for t in range(trials):
        sampler = np.random.default_rng([backend.params.seed, CALIBRATION_STREAM, t])
        x = sampler.uniform(0.0, 1.0, n)
        y = sampler.uniform(0.0, 1.0, n)
        r = int(sampler.integers(1, n)) if n > 1 else 0

        c_x = backend.encrypt(x, evaluation, stream=(CALIBRATION_STREAM, t, 0))
        c_y = backend.encrypt(y, evaluation, stream=(CALIBRATION_STREAM, t, 1))
        y_dec = backend.decrypt(c_y, secret)
        worst['b_enc'] = max(worst['b_enc'], np.max(np.abs(backend.decrypt(c_x, secret) - x)))

        product = backend.mult(c_x, c_y, evaluation, stream=(CALIBRATION_STREAM, t, 2))
        worst['b_mult'] = max(worst['b_mult'], np.max(np.abs(backend.decrypt(product, secret) - x * y_dec)))

        rotated = backend.rotate(c_y, r, evaluation, stream=(CALIBRATION_STREAM, t, 3))
        worst['b_rot'] = max(worst['b_rot'],
                             np.max(np.abs(backend.decrypt(rotated, secret) - np.roll(y_dec, -r))))

        refreshed = backend.bootstrap(c_y, evaluation, stream=(CALIBRATION_STREAM, t, 4))
        worst['b_boot'] = max(worst['b_boot'], np.max(np.abs(backend.decrypt(refreshed, secret) - y_dec)))

    observed = NoiseBounds(**{k: float(v) for k, v in worst.items()})
    logger.info('[Calibrate] %s N=%d scale=2^%d observed %s', backend.name, backend.params.ring_degree,
                backend.params.scale_bits, observed.to_dict())
    return CalibrationResult(observed.scaled(safety), observed, trials, safety)
