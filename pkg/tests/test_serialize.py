import json

import numpy as np
import pytest

from dest import serialize
from dest.serialize import FormatError


def test_round_trip_bit_identical(tmp_path):
    arr = np.random.default_rng(0).normal(size=(2, 3, 4)).astype(np.float32)
    serialize.save_tensor(tmp_path / "a.tnsr", arr)
    back = serialize.load_tensor(tmp_path / "a.tnsr")
    assert back.dtype == np.float32 and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_header_layout():
    blob = serialize.encode_tensor(np.zeros((1, 64, 192), np.float32))
    assert blob.startswith(b"TNSR v1 3 1 64 192\n")
    assert len(blob) == len(b"TNSR v1 3 1 64 192\n") + 64 * 192 * 4


def test_scalar_round_trip():
    assert serialize.decode_tensor(serialize.encode_tensor(np.float32(2.5))) == 2.5


def test_rejects_byte_swapped_magic():
    blob = serialize.encode_tensor(np.ones(3, np.float32))
    with pytest.raises(FormatError, match="byte-order"):
        serialize.decode_tensor(b"RSNT" + blob[4:])


@pytest.mark.parametrize("blob", [b"XXXX v1 1 2\n" + bytes(8), b"TNSR v2 1 2\n" + bytes(8),
                                  b"TNSR v1 2 2\n" + bytes(8), b"TNSR v1 1 2\n" + bytes(7),
                                  b"TNSR v1 1 x\n", b"TNSR v1 1 2"])
def test_rejects_malformed(blob):
    with pytest.raises(FormatError):
        serialize.decode_tensor(blob)


def test_checkpoint_directory(tmp_path):
    tensors = {"stage1.embed.conv.weight": np.ones((2, 3), np.float32),
               "a/b": np.arange(4, dtype=np.float32)}
    serialize.save_checkpoint(tmp_path / "ck", tensors, {"step": 3})
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert set(manifest["tensors"]) == set(tensors)
    back, meta = serialize.load_checkpoint(tmp_path / "ck")
    assert meta == {"step": 3}
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
