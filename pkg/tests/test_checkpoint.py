import struct

import numpy as np
import pytest

from dtkt.checkpoint import (
    MAGIC,
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from dtkt.model import WriteMode


def test_round_trip_bit_equal(tmp_path, tiny_config, tiny_params):
    path = save_checkpoint(tiny_params, tiny_config, tmp_path / "m.ckpt", WriteMode.ADD_ONLY, {"note": [1, 2]})
    ck = load_checkpoint(path)
    assert ck.config == tiny_config and ck.mode is WriteMode.ADD_ONLY
    assert ck.extra == {"note": [1, 2]}
    for name, t in tiny_params.params.items():
        assert ck.params[name].data.tobytes() == t.data.astype("<f4").tobytes()


def test_encoding_is_stable(tiny_config, tiny_params):
    assert encode_checkpoint(tiny_params, tiny_config) == encode_checkpoint(tiny_params.copy(), tiny_config)


def test_header_layout(tiny_config, tiny_params):
    raw = encode_checkpoint(tiny_params, tiny_config)
    magic, version, meta_len = struct.unpack_from("<4sII", raw)
    assert magic == b"DTKT" and version == 1
    n_floats = sum(int(np.prod(s)) for s in tiny_config.param_shapes().values())
    assert len(raw) == 12 + meta_len + 4 * n_floats


@pytest.mark.parametrize("cut", [3, 20, -1])
def test_truncated(tiny_config, tiny_params, cut):
    raw = encode_checkpoint(tiny_params, tiny_config)
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw[:cut])


def test_trailing_bytes(tiny_config, tiny_params):
    with pytest.raises(CheckpointError):
        decode_checkpoint(encode_checkpoint(tiny_params, tiny_config) + b"\0")


def test_wrong_magic_names_expected(tiny_config, tiny_params):
    raw = b"XXXX" + encode_checkpoint(tiny_params, tiny_config)[4:]
    with pytest.raises(CheckpointError, match="DTKT"):
        decode_checkpoint(raw)


def test_version_mismatch(tiny_config, tiny_params):
    raw = bytearray(encode_checkpoint(tiny_params, tiny_config))
    struct.pack_into("<I", raw, 4, 2)
    with pytest.raises(CheckpointError, match="version 2"):
        decode_checkpoint(bytes(raw))


def test_corrupt_metadata(tiny_config, tiny_params):
    raw = bytearray(encode_checkpoint(tiny_params, tiny_config))
    raw[12] = ord("#")
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(raw))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.ckpt")


def test_shape_mismatch_rejected_on_save(tiny_config, tiny_params, tmp_path):
    tiny_params["out_b"].data = np.zeros(2, np.float32)
    with pytest.raises(CheckpointError):
        save_checkpoint(tiny_params, tiny_config, tmp_path / "m.ckpt")
    assert not (tmp_path / "m.ckpt").exists()


def test_magic_constant():
    assert MAGIC == b"DTKT"
