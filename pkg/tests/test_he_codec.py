import numpy as np
import pytest

from errors import ProtocolError
from he_backend import BackendParams
from he_codec import (MAGIC, dump_ciphertext, dump_evaluation_keys, dump_secret_key, limb_count, load_ciphertext,
                      load_evaluation_keys, load_secret_key, pack_blobs, payload_offset, unpack_blobs)


def test_limb_count():
    assert limb_count(2 ** 38) == 1
    assert limb_count(2 ** 94) == 2
    assert limb_count(2 ** 64 - 1) == 1


def test_toy_ciphertext_survives_serialization(toy):
    backend, keys = toy
    c = backend.mult(backend.encrypt([0.3, 0.6], keys), backend.encrypt([0.5, 0.5], keys), keys)
    blob = dump_ciphertext(c, backend.params)

    assert blob.startswith(MAGIC)
    loaded = load_ciphertext(blob)
    assert (loaded.level, loaded.scale, loaded.slot_count, loaded.backend) == (c.level, c.scale, c.slot_count,
                                                                             c.backend)
    assert np.array_equal(backend.decrypt(loaded, keys.secret), backend.decrypt(c, keys.secret))
    assert dump_ciphertext(loaded, backend.params) == blob


def test_noise_sim_payload_is_float64(noise_sim):
    backend, keys = noise_sim
    c = backend.encrypt([0.25, 0.75], keys)
    blob = dump_ciphertext(c, backend.params)

    assert len(blob) == payload_offset(blob) + 8 * backend.slot_count
    assert np.array_equal(load_ciphertext(blob).payload, c.payload)


def test_truncated_and_corrupt_blobs(toy):
    backend, keys = toy
    blob = dump_ciphertext(backend.encrypt([0.5], keys), backend.params)

    with pytest.raises(ProtocolError, match='truncated'):
        load_ciphertext(blob[:-1])
    with pytest.raises(ProtocolError, match='trailing'):
        load_ciphertext(blob + b'\x00')
    with pytest.raises(ProtocolError, match='magic'):
        load_ciphertext(b'XXXX' + blob[4:])
    with pytest.raises(ProtocolError, match='version'):
        load_ciphertext(blob[:4] + b'\x09\x00' + blob[6:])


def test_secret_key_blob_keeps_signed_coefficients(toy):
    backend, keys = toy
    blob = dump_secret_key(keys.secret)
    restored = load_secret_key(blob, backend.params)

    assert restored.data.tolist() == keys.secret.data.tolist()
    with pytest.raises(ProtocolError):
        load_secret_key(blob, backend.params, token=True)


def test_evaluation_keys_round_trip(toy):
    backend, keys = toy
    restored = load_evaluation_keys(dump_evaluation_keys(keys.evaluation), backend.params, backend.name)

    assert restored.rotation_steps == keys.evaluation.rotation_steps
    c = backend.encrypt([0.2, 0.4, 0.6], restored, stream=(5,))
    rotated = backend.bootstrap(backend.rotate(c, 1, restored), restored)
    assert backend.decrypt(rotated, keys.secret)[:2] == pytest.approx([0.4, 0.6], abs=1e-3)


def test_evaluation_keys_reject_other_ring(toy):
    backend, keys = toy
    with pytest.raises(ProtocolError):
        load_evaluation_keys(dump_evaluation_keys(keys.evaluation), BackendParams(ring_degree=32), backend.name)


def test_pack_blobs():
    packed = pack_blobs([b'a', b'', b'xyz'])
    assert packed[:4] == b'\x00\x00\x00\x03'
    assert unpack_blobs(packed) == [b'a', b'', b'xyz']
    with pytest.raises(ProtocolError):
        unpack_blobs(packed, expected=2)
    with pytest.raises(ProtocolError):
        unpack_blobs(packed[:-1])
