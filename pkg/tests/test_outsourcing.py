import json

import numpy as np
import pytest

import outsourcing
from encrypted_rerl import STRATEGY_TREE, client_finish, encrypt_model, encrypt_state
from errors import ConfigurationError, ProtocolError, SynthesisFailure
from experiment import MODE_CLIENT_SERVER, MODE_FILE, ExperimentConfig, run_experiment
from he_backend import BACKEND_NOISE_SIM, BACKEND_TOY_CKKS, NoiseBounds
from he_codec import dump_ciphertext, load_ciphertext, pack_blobs, payload_offset, unpack_blobs
from mdp_core import build_grid_world
from outsourcing import (MSG_ERROR, MSG_MODEL, MSG_RESULT, MSG_STATE, build_request, decode_frames, encode_frame,
                         handle_request, parse_response, scan_transcript, server_limits)
from rerl_core import build_linear_system

SIM = dict(backend=BACKEND_NOISE_SIM, ring_n=16, iters=6, calibration_trials=0)
TOY = dict(backend=BACKEND_TOY_CKKS, ring_n=16, iters=2, calibration_trials=0)


@pytest.fixture
def client():
    from app import app
    app.config['TESTING'] = True
    return app.test_client()


@pytest.fixture
def via_flask(monkeypatch, client):
    """Route client-server runs through the Flask test client instead of the network."""
    def post(endpoint, request, timeout=None):
        return client.post('/synthesize', data=request, content_type='application/octet-stream').data
    monkeypatch.setattr(outsourcing, 'post_request', post)


def _job(toy, square_system, iters=2):
    backend, keys = toy
    model = encrypt_model(square_system, backend, keys.evaluation)
    Z0 = encrypt_state(np.ones(3), backend, keys.evaluation, 3)
    return build_request(model, Z0, keys.evaluation, iters, STRATEGY_TREE)


def test_frames():
    data = encode_frame(MSG_MODEL, b'abc') + encode_frame(MSG_STATE, b'')
    assert decode_frames(data) == [(MSG_MODEL, b'abc'), (MSG_STATE, b'')]
    with pytest.raises(ProtocolError, match='truncated'):
        decode_frames(data[:-1])
    with pytest.raises(ProtocolError, match='truncated'):
        decode_frames(encode_frame(MSG_MODEL, b'abc')[:-1])


def test_request_carries_no_secret(toy, square_system):
    request = _job(toy, square_system)
    kinds = [kind for kind, _ in decode_frames(request)]

    assert kinds == [MSG_MODEL, MSG_STATE]
    assert scan_transcript(request, square_system) == []


def test_server_round_trip(toy, square_system):
    backend, keys = toy
    response, status = handle_request(_job(toy, square_system))

    assert status == 200
    assert [kind for kind, _ in decode_frames(response)] == [MSG_RESULT]
    Z_T, trace = parse_response(response)
    assert len(trace.wall_seconds) == 2
    assert Z_T.level == backend.params.levels
    assert np.all(backend.decrypt(Z_T, keys.secret)[:3] > 0)


def test_garbage_is_rejected_with_an_error_frame():
    response, status = handle_request(b'not a job at all')

    assert status == 400
    ((kind, payload),) = decode_frames(response)
    assert kind == MSG_ERROR
    assert json.loads(payload)['kind'] == 'ProtocolError'
    with pytest.raises(ProtocolError, match='server reported'):
        parse_response(response)


def test_server_rejects_more_iterations_than_allowed(monkeypatch, toy, square_system):
    monkeypatch.setenv('HERL_MAX_ITERS', '3')
    response, status = handle_request(_job(toy, square_system, iters=4))

    assert status == 400
    with pytest.raises(ProtocolError, match='allows 3'):
        parse_response(response)
    assert handle_request(_job(toy, square_system, iters=3))[1] == 200


def test_server_clamps_the_worker_count(monkeypatch, toy, square_system):
    backend, keys = toy
    model = encrypt_model(square_system, backend, keys.evaluation)
    Z0 = encrypt_state(np.ones(3), backend, keys.evaluation, 3)
    monkeypatch.setenv('HERL_MAX_WORKERS', '2')
    greedy = build_request(model, Z0, keys.evaluation, 2, STRATEGY_TREE, workers=10 ** 6)
    single = build_request(model, Z0, keys.evaluation, 2, STRATEGY_TREE, workers=1)

    clamped, status = handle_request(greedy)
    assert status == 200
    assert backend.decrypt(parse_response(clamped)[0], keys.secret).tolist() == \
        backend.decrypt(parse_response(handle_request(single)[0])[0], keys.secret).tolist()


def test_server_limits_come_from_the_environment(monkeypatch):
    monkeypatch.setenv('HERL_MAX_ITERS', '20')
    monkeypatch.setenv('HERL_MAX_WORKERS', '0')
    assert server_limits() == (20, 1)
    monkeypatch.setenv('HERL_MAX_ITERS', 'lots')
    with pytest.raises(ConfigurationError):
        server_limits()


def test_protocol_version_mismatch(toy, square_system):
    frames = decode_frames(_job(toy, square_system))
    parts = unpack_blobs(frames[0][1])
    header = json.loads(parts[0])
    header['protocol_version'] = 99
    parts[0] = json.dumps(header).encode('utf-8')
    request = encode_frame(MSG_MODEL, pack_blobs(parts)) + encode_frame(MSG_STATE, frames[1][1])

    response, status = handle_request(request)

    assert status == 400
    with pytest.raises(ProtocolError, match='protocol version'):
        parse_response(response)


def test_missing_state_frame(toy, square_system):
    model_only = encode_frame(*decode_frames(_job(toy, square_system))[0])
    _, status = handle_request(model_only)
    assert status == 400


def test_tampered_result_is_detected(toy, square_system, square_grid):
    backend, keys = toy
    response, _ = handle_request(_job(toy, square_system))
    Z_T, _ = parse_response(response)

    blob = bytearray(dump_ciphertext(Z_T, backend.params))
    # low byte of the upper limb of the constant coefficient of c0
    blob[payload_offset(bytes(blob)) + 8] ^= 0x01
    tampered = load_ciphertext(bytes(blob))

    with pytest.raises(SynthesisFailure):
        client_finish(tampered, backend, keys.secret, build_grid_world(square_grid), 10.0)


def test_health(client):
    response = client.get('/health')

    assert response.status_code == 200
    body = response.get_json()
    assert body['status'] == 'healthy'
    assert body['protocol_version'] == outsourcing.PROTOCOL_VERSION
    assert set(body['capabilities']['backends']) == {BACKEND_NOISE_SIM, BACKEND_TOY_CKKS}
    assert body['busy'] is False
    assert response.headers['Access-Control-Allow-Origin'] == '*'


def test_synthesize_rejects_an_empty_body(client):
    response = client.post('/synthesize', data=b'')

    assert response.status_code == 400
    ((kind, payload),) = decode_frames(response.data)
    assert kind == MSG_ERROR
    assert 'empty' in json.loads(payload)['error']


def test_synthesize_over_http(client, toy, square_system):
    backend, keys = toy
    request = _job(toy, square_system)
    response = client.post('/synthesize', data=request, content_type='application/octet-stream')

    assert response.status_code == 200
    assert response.mimetype == 'application/octet-stream'
    expected, _ = handle_request(request)
    got, _ = parse_response(response.data)
    want, _ = parse_response(expected)
    assert np.array_equal(backend.decrypt(got, keys.secret), backend.decrypt(want, keys.secret))


@pytest.mark.parametrize('settings', [SIM, TOY])
def test_execution_modes_agree(via_flask, tmp_path, settings):
    in_process = run_experiment(ExperimentConfig(**settings))
    by_file = run_experiment(ExperimentConfig(**settings, mode=MODE_FILE), exchange_dir=str(tmp_path))
    by_server = run_experiment(ExperimentConfig(**settings, mode=MODE_CLIENT_SERVER, endpoint='http://testserver'))

    assert np.array_equal(in_process.z_tilde, by_file.z_tilde)
    assert np.array_equal(in_process.z_tilde, by_server.z_tilde)
    assert by_server.transcript.startswith(by_file.transcript[:64])


def test_toy_ckks_transcript_is_clean(tmp_path):
    result = run_experiment(ExperimentConfig(**TOY, mode=MODE_FILE), exchange_dir=str(tmp_path))
    system = build_linear_system(build_grid_world(ExperimentConfig(**TOY).grid_spec), 10.0)

    assert result.transcript
    assert scan_transcript(result.transcript, system) == []


def test_noiseless_simulator_transcript_leaks(tmp_path):
    config = ExperimentConfig(**SIM, mode=MODE_FILE, noise_bounds=NoiseBounds.zero())
    result = run_experiment(config, exchange_dir=str(tmp_path))
    system = build_linear_system(build_grid_world(config.grid_spec), config.lam)

    assert scan_transcript(result.transcript, system) != []
