"""
Small ring-LWE CKKS over Z_Q[X]/(X^N + 1).

Polynomials are numpy object arrays of Python ints so that products of
~190-bit values stay exact.  Multiplication is schoolbook negacyclic
convolution, which is fine at the ring sizes used here (N <= 2^9).

Moduli form a power-of-two chain Q_l = q0 * Delta^l; key switching uses the
special modulus P = Q_L.  Bootstrapping is a recryption oracle: the server
holds a token wrapping the secret key, decrypts, and re-encrypts at the top
level after adding uniform noise of boot_noise_scale * N / Delta per slot.
"""

from __future__ import annotations

import logging
from functools import lru_cache
from typing import Dict, Tuple

import numpy as np

import he_codec
from errors import DecryptionError, InvalidInputError
from he_backend import (BACKEND_TOY_CKKS, TAG_BOOT, TAG_ENC, TAG_KEYGEN, SECURITY_BANNER, BackendParams,
                        Ciphertext, EvaluationKeys, HeBackend, KeyMaterial, SecretKey, Stream, _evaluation,
                        power_of_two_steps)

logger = logging.getLogger(__name__)

Poly = np.ndarray


@lru_cache(maxsize=8)
def _negacyclic_layout(N: int) -> Tuple[np.ndarray, np.ndarray]:
    i = np.arange(N)[:, None]
    j = np.arange(N)[None, :]
    index = (j - i) % N
    sign = np.where(j >= i, 1, -1).astype(object)
    return index, sign


def poly_mul(a: Poly, b: Poly, modulus: int) -> Poly:
    """Negacyclic product a * b mod (X^N + 1, modulus)."""
    index, sign = _negacyclic_layout(len(a))
    return np.dot(a, b[index] * sign) % modulus


def poly_automorphism(a: Poly, g: int, modulus: int) -> Poly:
    """Apply X -> X^g (g odd): coefficient k moves to k*g mod 2N, negated past N."""
    N = len(a)
    target = (np.arange(N) * g) % (2 * N)
    values = a.copy()
    wrapped = target >= N
    values[wrapped] = -values[wrapped]
    out = np.empty(N, dtype=object)
    out[target % N] = values
    return out % modulus


def centered(a: Poly, modulus: int) -> Poly:
    half = modulus // 2
    return np.array([int(v) - modulus if v > half else int(v) for v in a], dtype=object)


def _as_poly(values) -> Poly:
    out = np.empty(len(values), dtype=object)
    out[:] = [int(v) for v in values]
    return out


class CkksEncoder:
    """Canonical embedding between n = N/2 complex slots and real polynomials."""

    def __init__(self, ring_degree: int):
        N = ring_degree
        self.N = N
        self.n = N // 2
        self.twist = np.exp(1j * np.pi * np.arange(N) / N)
        # slot j sits at the root zeta^(5^j); root zeta^(2t+1) is FFT bin t
        powers = np.array([pow(5, j, 2 * N) for j in range(self.n)])
        self.slot_index = (powers - 1) // 2
        self.conj_index = (2 * N - powers - 1) // 2

    def encode(self, slots: np.ndarray, scale: float) -> Poly:
        v = np.zeros(self.N, dtype=complex)
        v[self.slot_index] = slots
        v[self.conj_index] = np.conj(slots)
        coeffs = (np.fft.fft(v) / self.N * np.conj(self.twist)).real
        return _as_poly(np.rint(coeffs * scale))

    def decode(self, coeffs: Poly, scale: float) -> np.ndarray:
        values = np.array([float(v) for v in coeffs]) / scale
        evaluated = self.N * np.fft.ifft(values * self.twist)
        return evaluated[self.slot_index].real


class ToyCkksBackend(HeBackend):
    """Ring-LWE CKKS engine implementing HeBackend."""

    name = BACKEND_TOY_CKKS

    def __init__(self, params: BackendParams):
        super().__init__(params)
        self.encoder = CkksEncoder(params.ring_degree)
        self.top_modulus = params.modulus_at(params.levels)
        self.special_modulus = self.top_modulus
        self._token_cache: Dict[bytes, SecretKey] = {}
        logger.warning(SECURITY_BANNER)

    # sampling

    def _ternary(self, rng: np.random.Generator) -> Poly:
        return rng.integers(-1, 2, size=self.params.ring_degree).astype(object)

    def _gaussian(self, rng: np.random.Generator) -> Poly:
        samples = np.rint(rng.normal(0.0, self.params.noise_stddev, self.params.ring_degree))
        return samples.astype(np.int64).astype(object)

    def _uniform(self, rng: np.random.Generator, modulus: int) -> Poly:
        width = (modulus.bit_length() + 64 + 7) // 8
        raw = rng.bytes(width * self.params.ring_degree)
        return _as_poly([int.from_bytes(raw[k * width:(k + 1) * width], "little") % modulus
                         for k in range(self.params.ring_degree)])

    # keys

    def _switching_key(self, rng: np.random.Generator, s: Poly, s_from: Poly) -> Tuple[Poly, Poly]:
        big = self.special_modulus * self.top_modulus
        a = self._uniform(rng, big)
        e = self._gaussian(rng)
        b = (-poly_mul(a, s, big) + e + self.special_modulus * s_from) % big
        return b, a

    def keygen(self) -> KeyMaterial:
        rng = self.rng(TAG_KEYGEN, (0,))
        q = self.top_modulus
        s = self._ternary(rng)
        a = self._uniform(rng, q)
        public = ((-poly_mul(a, s, q) + self._gaussian(rng)) % q, a)

        big = self.special_modulus * q
        relin = self._switching_key(rng, s, poly_mul(s, s, big))
        rotation = {}
        for step in power_of_two_steps(self.slot_count):
            g = pow(5, step, 2 * self.params.ring_degree)
            rotation[step] = self._switching_key(rng, s, poly_automorphism(s, g, big))

        secret = SecretKey(self.name, self.params, s)
        token = he_codec.dump_secret_key(secret, token=True)
        evaluation = EvaluationKeys(self.name, self.params, public, relin, rotation, token)
        logger.debug('[ToyCkks] keygen N=%d, %d rotation keys', self.params.ring_degree, len(rotation))
        return KeyMaterial(secret, evaluation)

    def _key_switch(self, d: Poly, key: Tuple[Poly, Poly], level: int) -> Tuple[Poly, Poly]:
        q = self.params.modulus_at(level)
        big = self.special_modulus * q
        d = centered(d, q)
        b, a = (np.asarray(part) % big for part in key)
        half = self.special_modulus // 2
        out = []
        for part in (b, a):
            product = poly_mul(d, part, big)
            out.append(((product + half) // self.special_modulus) % q)
        return out[0], out[1]

    def _wrap(self, c0: Poly, c1: Poly, level: int) -> Ciphertext:
        return Ciphertext((c0, c1), level, self.params.scale, self.slot_count, self.name)

    def _drop_to(self, c: Ciphertext, level: int) -> Tuple[Poly, Poly]:
        if c.level == level:
            return c.payload
        q = self.params.modulus_at(level)
        return tuple(np.asarray(part) % q for part in c.payload)

    # operations

    def _encrypt_slots(self, slots: np.ndarray, public, stream: Stream, tag: int) -> Ciphertext:
        rng = self.rng(tag, stream)
        q = self.top_modulus
        m = self.encoder.encode(slots, self.params.scale) % q
        b, a = public
        v = self._ternary(rng)
        c0 = (poly_mul(b, v, q) + self._gaussian(rng) + m) % q
        c1 = (poly_mul(a, v, q) + self._gaussian(rng)) % q
        return self._wrap(c0, c1, self.params.levels)

    def encrypt(self, x, keys, stream: Stream = None) -> Ciphertext:
        padded = self.check_message(x)
        return self._encrypt_slots(padded, _evaluation(keys).public_key, stream, TAG_ENC)

    def _decrypt_with(self, c: Ciphertext, s: Poly) -> np.ndarray:
        if not 0 <= c.level <= self.params.levels:
            raise DecryptionError(f'ciphertext level {c.level} outside the modulus chain')
        q = self.params.modulus_at(c.level)
        c0, c1 = c.payload
        message = centered((c0 + poly_mul(c1, s, q)) % q, q)
        return self.encoder.decode(message, c.scale)

    def decrypt(self, c: Ciphertext, secret: SecretKey) -> np.ndarray:
        self.check_ciphertext(c)
        self.check_secret(secret)
        return self._decrypt_with(c, secret.data)

    def add(self, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
        self.check_ciphertext(c1)
        self.check_ciphertext(c2)
        level = min(c1.level, c2.level)
        q = self.params.modulus_at(level)
        a0, a1 = self._drop_to(c1, level)
        b0, b1 = self._drop_to(c2, level)
        return self._wrap((a0 + b0) % q, (a1 + b1) % q, level)

    def mult(self, c1: Ciphertext, c2: Ciphertext, keys, stream: Stream = None) -> Ciphertext:
        self.check_ciphertext(c1)
        self.check_ciphertext(c2)
        level = self.check_mult_levels(c1, c2)
        q = self.params.modulus_at(level)
        a0, a1 = self._drop_to(c1, level)
        b0, b1 = self._drop_to(c2, level)
        d0 = poly_mul(a0, b0, q)
        d1 = (poly_mul(a0, b1, q) + poly_mul(a1, b0, q)) % q
        d2 = poly_mul(a1, b1, q)
        k0, k1 = self._key_switch(d2, _evaluation(keys).relin_key, level)
        return self._rescale((d0 + k0) % q, (d1 + k1) % q, level)

    def _rescale(self, c0: Poly, c1: Poly, level: int) -> Ciphertext:
        delta = 2 ** self.params.scale_bits
        lower = self.params.modulus_at(level - 1)
        half = delta // 2
        return self._wrap(((c0 + half) // delta) % lower, ((c1 + half) // delta) % lower, level - 1)

    def _rotate_pow2(self, c0: Poly, c1: Poly, step: int, keys: EvaluationKeys, level: int) -> Tuple[Poly, Poly]:
        q = self.params.modulus_at(level)
        g = pow(5, step, 2 * self.params.ring_degree)
        r0 = poly_automorphism(c0, g, q)
        r1 = poly_automorphism(c1, g, q)
        try:
            key = keys.rotation_keys[step]
        except KeyError:
            raise InvalidInputError(f'no rotation key for step {step}') from None
        k0, k1 = self._key_switch(r1, key, level)
        return (r0 + k0) % q, k1

    def rotate(self, c: Ciphertext, r: int, keys, stream: Stream = None) -> Ciphertext:
        self.check_ciphertext(c)
        r = self.check_rotation(r)
        if r == 0:
            return c
        evaluation = _evaluation(keys)
        c0, c1 = c.payload
        for step in power_of_two_steps(self.slot_count):
            if r & step:
                c0, c1 = self._rotate_pow2(c0, c1, step, evaluation, c.level)
        return self._wrap(c0, c1, c.level)

    def _token_secret(self, token: bytes) -> SecretKey:
        if not token:
            raise InvalidInputError('bootstrap needs a recryption token')
        secret = self._token_cache.get(token)
        if secret is None:
            secret = he_codec.load_secret_key(token, self.params, token=True)
            self._token_cache[token] = secret
        return secret

    def bootstrap(self, c: Ciphertext, keys, stream: Stream = None) -> Ciphertext:
        self.check_ciphertext(c)
        evaluation = _evaluation(keys)
        secret = self._token_secret(evaluation.recryption_token)
        slots = self._decrypt_with(c, secret.data)
        bound = self.params.boot_noise_scale * self.params.unit_noise()
        rng = self.rng(TAG_BOOT, stream)
        if bound > 0:
            slots = slots + rng.uniform(-bound, bound, size=slots.shape)
        seed_stream = tuple(rng.integers(0, 2 ** 32, size=2))
        return self._encrypt_slots(slots, evaluation.public_key, seed_stream, TAG_BOOT)
