import struct

import numpy as np
import pytest

from checkpoint import WPCKFormat, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from errors import CheckpointFormatError, CheckpointShapeError


@pytest.fixture
def blob(tiny_graph, trained_like_params):
    return encode_checkpoint(tiny_graph, trained_like_params, {"epoch": 3, "val_loss": 0.25, "seed": 1})


def _first_dim_offset(data):
    (blob_len,) = struct.unpack_from("<I", data, 8)
    name_at = 12 + blob_len + 4
    (name_len,) = struct.unpack_from("<H", data, name_at)
    return name_at + 2 + name_len + 1


def test_round_trip_is_bit_exact(blob, tiny_graph, trained_like_params):
    ckpt = decode_checkpoint(blob)
    assert ckpt.graph == tiny_graph
    assert ckpt.meta == {"epoch": 3, "val_loss": 0.25, "seed": 1}
    for name in trained_like_params.names:
        assert ckpt.params[name].tobytes() == trained_like_params[name].astype("<f4").tobytes()
    assert encode_checkpoint(ckpt.graph, ckpt.params, ckpt.meta) == blob


def test_running_stats_reload_as_non_trainable(blob):
    ckpt = decode_checkpoint(blob)
    assert "stem_bn.running_var" in ckpt.params
    assert "stem_bn.running_var" not in ckpt.params.trainable
    assert "stem_bn.gamma" in ckpt.params.trainable


def test_header_layout(blob):
    assert blob[:4] == b"WPCK"
    assert struct.unpack_from("<I", blob, 4)[0] == WPCKFormat.VERSION


def test_bad_magic_reports_offset_zero(blob):
    with pytest.raises(CheckpointFormatError) as err:
        decode_checkpoint(b"XPCK" + blob[4:])
    assert err.value.offset == 0


def test_unknown_version_reports_offset_four(blob):
    with pytest.raises(CheckpointFormatError) as err:
        decode_checkpoint(blob[:4] + struct.pack("<I", 2) + blob[8:])
    assert err.value.offset == 4


def test_truncated_file(blob):
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(blob[:-3])


def test_trailing_bytes(blob):
    with pytest.raises(CheckpointFormatError) as err:
        decode_checkpoint(blob + b"\x00")
    assert err.value.offset == len(blob)


def test_stored_shape_must_match_graph(blob):
    offset = _first_dim_offset(blob)
    corrupted = blob[:offset] + struct.pack("<I", 999) + blob[offset + 4:]
    with pytest.raises(CheckpointShapeError):
        decode_checkpoint(corrupted)


def test_encoding_wrong_shape_fails(tiny_graph, tiny_params):
    broken = tiny_params.copy()
    broken.tensors["classifier.bias"] = np.zeros(15, dtype=np.float32)
    with pytest.raises(CheckpointShapeError) as err:
        encode_checkpoint(tiny_graph, broken, {})
    assert err.value.tensor == "classifier.bias"


def test_save_and_load(tmp_path, tiny_graph, tiny_params):
    path = tmp_path / "ckpt.wpck"
    save_checkpoint(tiny_graph, tiny_params, {"epoch": 0}, path)
    first = path.read_bytes()
    ckpt = load_checkpoint(path)
    save_checkpoint(ckpt.graph, ckpt.params, ckpt.meta, path)
    assert path.read_bytes() == first
    assert not (tmp_path / "ckpt.wpck.tmp").exists()
