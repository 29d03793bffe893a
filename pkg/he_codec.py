"""
Binary encoding of ciphertexts and key material ("HERL" blobs).

Ciphertext layout (little-endian):
    magic "HERL" | u16 version | u32 N | u32 slot count | u8 level
    | i16 log2(scale) | u8 modulus count | u64 moduli...
    | coefficients

ToyCkks ciphertexts carry two polynomials of N coefficients; each coefficient
is ceil(bits(Q_level)/64) little-endian 64-bit limbs, low limb first.
NoiseSim ciphertexts use modulus count 0 and carry slot_count float64 values.

Key blobs share the prefix magic | u16 version | u8 key type and then list
records of polynomials.
"""

from __future__ import annotations

import math
import struct
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ProtocolError
from he_backend import (BACKEND_NOISE_SIM, BACKEND_TOY_CKKS, BackendParams, Ciphertext, EvaluationKeys,
                        SecretKey)

MAGIC = b'HERL'
FORMAT_VERSION = 1

KEY_PUBLIC = 0x10
KEY_RELIN = 0x11
KEY_ROTATION = 0x12
KEY_SECRET = 0x13
KEY_RECRYPTION = 0x14

_CT_HEADER = struct.Struct('<4sHIIBhB')
_KEY_HEADER = struct.Struct('<4sHBIIB')
_RECORD = struct.Struct('<IBB')
_LENGTH = struct.Struct('>I')


class _Reader:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if size < 0 or end > len(self.data):
            raise ProtocolError(f'truncated blob: need {size} bytes at offset {self.offset}, have {len(self.data)}')
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, layout: struct.Struct) -> tuple:
        return layout.unpack(self.take(layout.size))

    def done(self) -> None:
        if self.offset != len(self.data):
            raise ProtocolError(f'{len(self.data) - self.offset} trailing bytes after blob')


def limb_count(modulus: int) -> int:
    return max(1, math.ceil(modulus.bit_length() / 64))


def _product(moduli: Sequence[int]) -> int:
    total = 1
    for q in moduli:
        total *= int(q)
    return total


def _pack_poly(coeffs, limbs: int) -> bytes:
    width = 8 * limbs
    return b''.join(int(c).to_bytes(width, 'little') for c in coeffs)


def _unpack_poly(reader: _Reader, N: int, limbs: int, modulus: int) -> np.ndarray:
    width = 8 * limbs
    raw = reader.take(N * width)
    poly = np.empty(N, dtype=object)
    for k in range(N):
        poly[k] = int.from_bytes(raw[k * width:(k + 1) * width], 'little') % modulus
    return poly


def _check_magic(magic: bytes, version: int) -> None:
    if magic != MAGIC:
        raise ProtocolError(f'bad magic {magic!r}')
    if version != FORMAT_VERSION:
        raise ProtocolError(f'unsupported format version {version} (expected {FORMAT_VERSION})')


def _scale_exponent(scale: float) -> int:
    exponent = int(round(math.log2(scale)))
    if 2.0 ** exponent != scale:
        raise ProtocolError(f'scale {scale} is not a power of two')
    return exponent


def dump_ciphertext(c: Ciphertext, params: BackendParams) -> bytes:
    if c.backend == BACKEND_NOISE_SIM:
        header = _CT_HEADER.pack(MAGIC, FORMAT_VERSION, params.ring_degree, c.slot_count, c.level,
                                 _scale_exponent(c.scale), 0)
        return header + np.asarray(c.payload, dtype='<f8').tobytes()
    moduli = params.modulus_chain[:c.level + 1]
    header = _CT_HEADER.pack(MAGIC, FORMAT_VERSION, params.ring_degree, c.slot_count, c.level,
                             _scale_exponent(c.scale), len(moduli))
    limbs = limb_count(_product(moduli))
    body = b''.join(_pack_poly(poly, limbs) for poly in c.payload)
    return header + b''.join(struct.pack('<Q', q) for q in moduli) + body


def load_ciphertext(blob: bytes) -> Ciphertext:
    reader = _Reader(blob)
    magic, version, N, slots, level, scale_exp, count = reader.unpack(_CT_HEADER)
    _check_magic(magic, version)
    if count == 0:
        values = np.frombuffer(reader.take(8 * slots), dtype='<f8').astype(float)
        values.setflags(write=False)
        reader.done()
        return Ciphertext(values, level, 2.0 ** scale_exp, slots, BACKEND_NOISE_SIM)
    if count != level + 1:
        raise ProtocolError(f'level {level} needs {level + 1} moduli, blob lists {count}')
    moduli = [reader.unpack(struct.Struct('<Q'))[0] for _ in range(count)]
    modulus = _product(moduli)
    limbs = limb_count(modulus)
    payload = tuple(_unpack_poly(reader, N, limbs, modulus) for _ in range(2))
    reader.done()
    return Ciphertext(payload, level, 2.0 ** scale_exp, slots, BACKEND_TOY_CKKS)


def payload_offset(blob: bytes) -> int:
    """Byte offset of the first coefficient in a ciphertext blob."""
    count = _CT_HEADER.unpack_from(blob)[-1]
    return _CT_HEADER.size + 8 * count


def _dump_key(kind: int, params: BackendParams, moduli: Sequence[int],
              records: Sequence[Tuple[int, Sequence[np.ndarray]]]) -> bytes:
    out = [_KEY_HEADER.pack(MAGIC, FORMAT_VERSION, kind, params.ring_degree, params.slot_count, len(moduli))]
    out.extend(struct.pack('<Q', q) for q in moduli)
    out.append(struct.pack('<H', len(records)))
    limbs = limb_count(_product(moduli)) if moduli else 0
    for tag, polys in records:
        out.append(_RECORD.pack(tag, len(polys), limbs))
        out.extend(_pack_poly(poly, limbs) for poly in polys)
    return b''.join(out)


def _load_key(blob: bytes, expected_kind: int, params: BackendParams) -> List[Tuple[int, List[np.ndarray]]]:
    reader = _Reader(blob)
    magic, version, kind, N, slots, count = reader.unpack(_KEY_HEADER)
    _check_magic(magic, version)
    if kind != expected_kind:
        raise ProtocolError(f'expected key type 0x{expected_kind:02x}, got 0x{kind:02x}')
    if N != params.ring_degree or slots != params.slot_count:
        raise ProtocolError(f'key was made for N={N}, parameters say N={params.ring_degree}')
    moduli = [reader.unpack(struct.Struct('<Q'))[0] for _ in range(count)]
    modulus = _product(moduli)
    (num_records,) = reader.unpack(struct.Struct('<H'))
    records = []
    for _ in range(num_records):
        tag, num_polys, limbs = reader.unpack(_RECORD)
        records.append((tag, [_unpack_poly(reader, N, limbs, modulus) for _ in range(num_polys)]))
    reader.done()
    return records


def _key_moduli(params: BackendParams, backend: str, special: bool) -> Tuple[int, ...]:
    if backend == BACKEND_NOISE_SIM:
        return ()
    chain = params.modulus_chain
    return chain + chain if special else chain


def dump_secret_key(secret: SecretKey, token: bool = False) -> bytes:
    """Secret key blob; with token=True the blob is typed as a recryption token."""
    kind = KEY_RECRYPTION if token else KEY_SECRET
    moduli = _key_moduli(secret.params, secret.backend, special=False)
    if not moduli:
        return _dump_key(kind, secret.params, moduli, [])
    modulus = _product(moduli)
    return _dump_key(kind, secret.params, moduli, [(0, [np.asarray(secret.data, dtype=object) % modulus])])


def load_secret_key(blob: bytes, params: BackendParams, token: bool = False) -> SecretKey:
    records = _load_key(blob, KEY_RECRYPTION if token else KEY_SECRET, params)
    if not records:
        return SecretKey(BACKEND_NOISE_SIM, params, None)
    modulus = params.modulus_at(params.levels)
    stored = records[0][1][0]
    signed = np.array([int(v) - modulus if v > modulus // 2 else int(v) for v in stored], dtype=object)
    return SecretKey(BACKEND_TOY_CKKS, params, signed)


def pack_blobs(blobs: Sequence[bytes]) -> bytes:
    """Concatenate blobs behind a u32 count, each with a big-endian u32 length."""
    out = [_LENGTH.pack(len(blobs))]
    for blob in blobs:
        out.append(_LENGTH.pack(len(blob)))
        out.append(bytes(blob))
    return b''.join(out)


def unpack_blobs(data: bytes, expected: Optional[int] = None) -> List[bytes]:
    reader = _Reader(data)
    (count,) = reader.unpack(_LENGTH)
    if expected is not None and count != expected:
        raise ProtocolError(f'expected {expected} parts, got {count}')
    blobs = []
    for _ in range(count):
        (length,) = reader.unpack(_LENGTH)
        blobs.append(reader.take(length))
    reader.done()
    return blobs


def dump_evaluation_keys(keys: EvaluationKeys) -> bytes:
    params = keys.params
    chain = _key_moduli(params, keys.backend, special=False)
    special = _key_moduli(params, keys.backend, special=True)
    if keys.backend == BACKEND_NOISE_SIM:
        public = _dump_key(KEY_PUBLIC, params, (), [])
        relin = _dump_key(KEY_RELIN, params, (), [])
        rotation = _dump_key(KEY_ROTATION, params, (), [(step, []) for step in keys.rotation_steps])
    else:
        public = _dump_key(KEY_PUBLIC, params, chain, [(0, list(keys.public_key))])
        relin = _dump_key(KEY_RELIN, params, special, [(0, list(keys.relin_key))])
        rotation = _dump_key(KEY_ROTATION, params, special,
                             [(step, list(keys.rotation_keys[step])) for step in keys.rotation_steps])
    return pack_blobs([public, relin, rotation, keys.recryption_token])


def load_evaluation_keys(blob: bytes, params: BackendParams, backend: str) -> EvaluationKeys:
    public, relin, rotation, token = unpack_blobs(blob, expected=4)
    rotation_records = _load_key(rotation, KEY_ROTATION, params)
    if backend == BACKEND_NOISE_SIM:
        _load_key(public, KEY_PUBLIC, params)
        _load_key(relin, KEY_RELIN, params)
        return EvaluationKeys(backend, params, rotation_keys={tag: None for tag, _ in rotation_records},
                              recryption_token=token)
    public_records = _load_key(public, KEY_PUBLIC, params)
    relin_records = _load_key(relin, KEY_RELIN, params)
    if len(public_records) != 1 or len(relin_records) != 1:
        raise ProtocolError('public and relinearization keys must hold exactly one record')
    rotation_keys: Dict[int, tuple] = {tag: tuple(polys) for tag, polys in rotation_records}
    return EvaluationKeys(backend, params, tuple(public_records[0][1]), tuple(relin_records[0][1]),
                          rotation_keys, token)
