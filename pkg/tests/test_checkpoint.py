import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from peftreview import checkpoint
from peftreview.errors import FormatError

DIGEST = bytes(range(32))


def test_layout_of_a_single_tensor():
    arr = np.array([[1.0, -2.0, 0.5]], dtype=np.float32)
    blob = checkpoint.encode(checkpoint.KIND_PREFIX, DIGEST, [("x", arr)])
    assert blob[:4] == b"PEFT"
    assert struct.unpack_from("<H", blob, 4)[0] == 1
    assert blob[6] == checkpoint.KIND_PREFIX
    assert blob[7:39] == DIGEST
    assert struct.unpack_from("<I", blob, 39)[0] == 1
    assert struct.unpack_from("<H", blob, 43)[0] == 1 and blob[45:46] == b"x"
    assert blob[46] == 0 and blob[47] == 2
    assert struct.unpack_from("<2I", blob, 48) == (1, 3)
    assert blob[56:68] == arr.astype("<f4").tobytes()
    assert struct.unpack_from("<I", blob, 68)[0] == zlib.crc32(blob[:68])
    assert len(blob) == checkpoint.header_size([("x", 2)]) + arr.nbytes


@given(st.lists(st.tuples(st.text(min_size=1, max_size=12),
                          hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                                     elements=st.floats(-1e6, 1e6, width=32))),
                max_size=4),
       st.sampled_from(sorted(checkpoint.KIND_NAMES)))
def test_round_trip_is_bitwise(tensors, kind):
    blob = checkpoint.encode(kind, DIGEST, tensors)
    k, digest, back = checkpoint.decode(blob)
    assert (k, digest) == (kind, DIGEST)
    assert [n for n, _ in back] == [n for n, _ in tensors]
    for (_, a), (_, b) in zip(tensors, back):
        assert a.shape == b.shape and a.tobytes() == b.tobytes()
    assert checkpoint.encode(kind, DIGEST, back) == blob


def _valid():
    return checkpoint.encode(checkpoint.KIND_LORA, DIGEST, [("w", np.ones((2, 2), np.float32))])


def _recrc(body):
    return body + struct.pack("<I", zlib.crc32(body))


def test_rejects_bad_magic_version_kind():
    body = _valid()[:-4]
    with pytest.raises(FormatError, match="magic"):
        checkpoint.decode(_recrc(b"NOPE" + body[4:]))
    with pytest.raises(FormatError, match="version"):
        checkpoint.decode(_recrc(body[:4] + struct.pack("<H", 9) + body[6:]))
    with pytest.raises(FormatError, match="kind"):
        checkpoint.decode(_recrc(body[:6] + bytes([7]) + body[7:]))


def test_rejects_trailing_bytes_and_short_payload():
    body = _valid()[:-4]
    with pytest.raises(FormatError, match="trailing"):
        checkpoint.decode(_recrc(body + b"\0\0"))
    with pytest.raises(FormatError):
        checkpoint.decode(_recrc(body[:-4]))
    with pytest.raises(FormatError):
        checkpoint.decode(b"PEFT")


def test_any_single_bit_flip_is_detected():
    blob = _valid()
    for i in range(len(blob)):
        bad = bytearray(blob)
        bad[i] ^= 1
        with pytest.raises(FormatError):
            checkpoint.decode(bytes(bad))


def test_missing_file_is_a_format_error(tmp_path):
    with pytest.raises(FormatError):
        checkpoint.read(tmp_path / "nope.bin")
