import struct
import zlib

import numpy as np
import pytest

from gatedssd.artifacts import MAGIC, decode_model, encode_model, load_detector, load_model, save_model
from gatedssd.config import RunConfig, parse_config
from gatedssd.errors import ModelCorruptError, ModelFormatError, ModelTruncatedError
from gatedssd.model import GatedSSD


def _random_model(seed=0):
    cfg = parse_config("train:\n  epochs: 7\n")
    model = GatedSSD(cfg.model_config(), seed=seed)
    rng = np.random.default_rng(seed)
    params = {k: rng.standard_normal(v.shape).astype(np.float32) for k, v in model.params.items()}
    return cfg, params


def test_round_trip_bitwise(tmp_path):
    cfg, params = _random_model()
    save_model(tmp_path / "m.gdw", cfg, params)
    cfg2, params2 = load_model(tmp_path / "m.gdw")
    assert cfg2 == cfg
    assert list(params2) == list(params)
    for k in params:
        assert params2[k].dtype == np.float32 and params2[k].tobytes() == params[k].tobytes()


def test_load_detector(tmp_path):
    cfg, params = _random_model(1)
    save_model(tmp_path / "m.gdw", cfg, params)
    cfg2, model = load_detector(tmp_path / "m.gdw")
    assert model.params["gate.dense.w"].tobytes() == params["gate.dense.w"].tobytes()


def test_layout():
    cfg = RunConfig()
    data = encode_model(cfg, {"a": np.array([[1.0, 2.0]], np.float32)})
    assert data[:4] == MAGIC
    (hlen,) = struct.unpack_from("<I", data, 4)
    pos = 8 + hlen
    assert struct.unpack_from("<I", data, pos) == (1,) and data[pos + 4:pos + 5] == b"a"
    assert struct.unpack_from("<III", data, pos + 5) == (2, 1, 2)
    assert np.frombuffer(data, "<f4", 2, pos + 17).tolist() == [1.0, 2.0]
    assert struct.unpack_from("<I", data, len(data) - 4)[0] == zlib.crc32(data[:-4])
    assert len(data) == pos + 17 + 8 + 4


def test_flipped_byte_is_corruption():
    cfg, params = _random_model()
    data = bytearray(encode_model(cfg, params))
    data[len(data) - 100] ^= 0x01
    with pytest.raises(ModelCorruptError):
        decode_model(bytes(data))


def test_empty_and_bad_magic(tmp_path):
    (tmp_path / "empty").write_bytes(b"")
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "empty")
    with pytest.raises(ModelFormatError):
        decode_model(b"GDW2" + bytes(20))


def test_truncation_reports_offset():
    cfg, params = _random_model()
    data = encode_model(cfg, params)
    cut = data[:len(data) // 2]
    with pytest.raises(ModelTruncatedError) as err:
        decode_model(cut)
    assert 0 < err.value.offset <= len(cut)
    assert f"offset {err.value.offset}" in str(err.value)


def test_checksum_checked_before_tensors(monkeypatch):
    cfg, params = _random_model()
    data = bytearray(encode_model(cfg, params))
    data[-1] ^= 0xFF
    calls = []
    monkeypatch.setattr(np, "frombuffer", lambda *a, **k: calls.append(a))
    with pytest.raises(ModelCorruptError):
        decode_model(bytes(data))
    assert not calls
