"""
Client/server exchange of the encrypted synthesis job.

Messages are frames: 4-byte big-endian payload length, 1-byte type, payload.

    0x01 model   pack(job header JSON, evaluation keys, Enc(w), Enc(A_i)..., Enc(e_i)...)
    0x02 state   pack(Enc(Z_0))
    0x03 result  pack(trace JSON, Enc(Z_T))
    0x04 error   {"error": ..., "kind": ...} as JSON

The server side (handle_request) rebuilds a backend from the public
parameters, never receives the secret key and never decrypts; bootstrap uses
the recryption token carried with the evaluation keys.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from typing import List, Optional, Tuple

import numpy as np
import requests

from encrypted_rerl import EncryptedModel, IterationTrace, iterate_encrypted
from errors import ConfigurationError, HerlError, InvalidInputError, ProtocolError
from he_backend import (BackendParams, Ciphertext, EvaluationKeys, NoiseBounds,
                        make_backend)
from he_codec import (dump_ciphertext, dump_evaluation_keys, load_ciphertext, load_evaluation_keys,
                      pack_blobs, unpack_blobs)
from rerl_core import LinearSystem

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1

MSG_MODEL = 0x01
MSG_STATE = 0x02
MSG_RESULT = 0x03
MSG_ERROR = 0x04

_FRAME = struct.Struct('>IB')

REQUEST_FILE = 'request.herl'
RESULT_FILE = 'result.herl'

DEFAULT_TIMEOUT = 3600
DEFAULT_MAX_ITERS = 1000


def server_limits() -> Tuple[int, int]:
    """(max iterations, max workers) a server accepts, from HERL_MAX_ITERS and HERL_MAX_WORKERS."""
    try:
        max_iters = int(os.environ.get('HERL_MAX_ITERS', DEFAULT_MAX_ITERS))
        max_workers = int(os.environ.get('HERL_MAX_WORKERS', os.cpu_count() or 1))
    except ValueError as e:
        raise ConfigurationError(f'bad server limit: {e}') from e
    return max(1, max_iters), max(1, max_workers)


def encode_frame(kind: int, payload: bytes) -> bytes:
    return _FRAME.pack(len(payload), kind) + payload


def decode_frames(data: bytes) -> List[Tuple[int, bytes]]:
    frames, offset = [], 0
    while offset < len(data):
        if offset + _FRAME.size > len(data):
            raise ProtocolError('truncated frame header')
        length, kind = _FRAME.unpack_from(data, offset)
        offset += _FRAME.size
        if offset + length > len(data):
            raise ProtocolError(f'truncated frame: need {length} bytes, have {len(data) - offset}')
        frames.append((kind, data[offset:offset + length]))
        offset += length
    return frames


def error_frame(error: HerlError) -> bytes:
    return encode_frame(MSG_ERROR, json.dumps(error.to_dict()).encode('utf-8'))


def build_request(model: EncryptedModel, Z0: Ciphertext, keys: EvaluationKeys, iters: int,
                  strategy: str, workers: int = 1, injected: Optional[NoiseBounds] = None) -> bytes:
    """
    Serialize the encrypted model and start state into model + state frames.

    Only public material is written: parameters, evaluation keys (with the
    recryption token) and ciphertexts.
    """
    params = keys.params
    header = {
        'protocol_version': PROTOCOL_VERSION,
        'backend': model.backend,
        'params': params.to_dict(),
        'injected': injected.to_dict() if injected is not None else None,
        'size': model.size,
        'iters': int(iters),
        'rotation_sum': strategy,
        'workers': int(workers),
    }
    parts = [json.dumps(header).encode('utf-8'), dump_evaluation_keys(keys), dump_ciphertext(model.enc_w, params)]
    parts.extend(dump_ciphertext(c, params) for c in model.enc_rows)
    parts.extend(dump_ciphertext(c, params) for c in model.enc_selectors)
    model_frame = encode_frame(MSG_MODEL, pack_blobs(parts))
    state_frame = encode_frame(MSG_STATE, pack_blobs([dump_ciphertext(Z0, params)]))
    return model_frame + state_frame


def _read_header(blob: bytes) -> dict:
    try:
        header = json.loads(blob.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f'unreadable job header: {e}') from e
    version = header.get('protocol_version')
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f'protocol version {version} not supported (server speaks {PROTOCOL_VERSION})')
    return header


def _single(frames: List[Tuple[int, bytes]], kind: int) -> bytes:
    matches = [payload for k, payload in frames if k == kind]
    if len(matches) != 1:
        raise ProtocolError(f'expected one frame of type 0x{kind:02x}, got {len(matches)}')
    return matches[0]


def run_job(data: bytes) -> bytes:
    """Server side: run the encrypted iteration described by a request and return the result frame."""
    frames = decode_frames(data)
    parts = unpack_blobs(_single(frames, MSG_MODEL))
    if len(parts) < 3:
        raise ProtocolError('model message is missing parts')
    header = _read_header(parts[0])
    size = int(header['size'])
    if len(parts) != 3 + 2 * size:
        raise ProtocolError(f'model message for S={size} needs {3 + 2 * size} parts, got {len(parts)}')

    params = BackendParams.from_dict(header['params'])
    injected = NoiseBounds(**header['injected']) if header.get('injected') else None
    backend = make_backend(params, header['backend'], injected)
    keys = load_evaluation_keys(parts[1], params, backend.name)
    enc_w = load_ciphertext(parts[2])
    model = EncryptedModel(
        enc_rows=tuple(load_ciphertext(blob) for blob in parts[3:3 + size]),
        enc_w=enc_w,
        enc_selectors=tuple(load_ciphertext(blob) for blob in parts[3 + size:]),
        size=size,
        backend=backend.name,
    )
    (state_blob,) = unpack_blobs(_single(frames, MSG_STATE), expected=1)
    Z0 = load_ciphertext(state_blob)
    for c in (enc_w, Z0):
        if c.backend != backend.name:
            raise ProtocolError(f'{c.backend} ciphertext sent to a {backend.name} job')

    iters, workers = int(header['iters']), int(header.get('workers', 1))
    max_iters, max_workers = server_limits()
    if iters > max_iters:
        raise ProtocolError(f'job asks for {iters} iterations, this server allows {max_iters}')
    if workers > max_workers:
        logger.warning('[Server] clamping workers %d to %d', workers, max_workers)
        workers = max_workers

    logger.info('[Server] job S=%d T=%d backend=%s N=%d', size, iters, backend.name, params.ring_degree)
    run = iterate_encrypted(model, Z0, iters, backend, keys, header.get('rotation_sum', 'tree'), workers)
    trace = {'wall_seconds': run.trace.wall_seconds, 'boot_seconds': run.trace.boot_seconds}
    payload = pack_blobs([json.dumps(trace).encode('utf-8'), dump_ciphertext(run.Z_T, params)])
    return encode_frame(MSG_RESULT, payload)


def handle_request(data: bytes) -> Tuple[bytes, int]:
    """run_job with errors turned into an error frame; returns (response bytes, HTTP status)."""
    try:
        return run_job(data), 200
    except (ProtocolError, InvalidInputError) as e:
        logger.warning('[Server] rejected job: %s', e)
        return error_frame(e), 400
    except HerlError as e:
        logger.error('[Server] job failed: %s', e)
        return error_frame(e), 500
    except (KeyError, TypeError, ValueError) as e:
        logger.warning('[Server] malformed job: %s', e)
        return error_frame(ProtocolError(f'malformed job: {e}')), 400


def parse_response(data: bytes) -> Tuple[Ciphertext, IterationTrace]:
    frames = decode_frames(data)
    for kind, payload in frames:
        if kind == MSG_ERROR:
            try:
                details = json.loads(payload.decode('utf-8'))
            except (UnicodeDecodeError, json.JSONDecodeError):
                details = {'error': 'unreadable error frame', 'kind': 'ProtocolError'}
            raise ProtocolError(f"server reported {details.get('kind')}: {details.get('error')}")
    trace_blob, result_blob = unpack_blobs(_single(frames, MSG_RESULT), expected=2)
    try:
        timing = json.loads(trace_blob.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f'unreadable trace: {e}') from e
    trace = IterationTrace(list(timing.get('wall_seconds', [])), list(timing.get('boot_seconds', [])))
    return load_ciphertext(result_blob), trace


def post_request(endpoint: str, request: bytes, timeout: float = DEFAULT_TIMEOUT) -> bytes:
    url = endpoint.rstrip('/') + '/synthesize'
    logger.info('[Client] posting %d bytes to %s', len(request), url)
    try:
        response = requests.post(url, data=request, timeout=timeout,
                                 headers={'Content-Type': 'application/octet-stream'})
    except requests.RequestException as e:
        raise ProtocolError(f'cannot reach server at {url}: {e}') from e
    if response.status_code != 200 and not response.content:
        raise ProtocolError(f'server returned HTTP {response.status_code}')
    return response.content


def write_exchange(directory: str, request: bytes) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, REQUEST_FILE)
    with open(path, 'wb') as handle:
        handle.write(request)
    return path


def serve_directory(directory: str) -> str:
    """Process request.herl in a directory and write result.herl next to it."""
    request_path = os.path.join(directory, REQUEST_FILE)
    try:
        with open(request_path, 'rb') as handle:
            request = handle.read()
    except OSError as e:
        raise ProtocolError(f'no request to serve in {directory}: {e}') from e
    response, _ = handle_request(request)
    result_path = os.path.join(directory, RESULT_FILE)
    with open(result_path, 'wb') as handle:
        handle.write(response)
    return result_path


def read_exchange_result(directory: str) -> bytes:
    try:
        with open(os.path.join(directory, RESULT_FILE), 'rb') as handle:
            return handle.read()
    except OSError as e:
        raise ProtocolError(f'no result in {directory}: {e}') from e


def plaintext_patterns(system: LinearSystem) -> List[bytes]:
    """Byte patterns of the model coefficients as they would appear if leaked."""
    patterns = set()
    for value in np.concatenate([system.A.ravel(), system.w]):
        if value == 0:
            continue
        patterns.add(struct.pack('<d', value))
        patterns.add(struct.pack('>d', value))
        patterns.add(repr(float(value)).encode('ascii'))
    return sorted(patterns)


def scan_transcript(transcript: bytes, system: LinearSystem) -> List[bytes]:
    """Return every plaintext model pattern found in the transcript (empty means clean)."""
    return [pattern for pattern in plaintext_patterns(system) if pattern in transcript]
