import json
import struct

import numpy as np
import pytest

from ctofdot.tensor_io import (BadMagicError, BadMetadataError, NonFiniteError,
                               TruncatedError, UnsupportedVersionError,
                               read_tensor, write_tensor)


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    t = rng.normal(size=(5, 4, 3))
    # include the awkward citizens: signed zero and denormals
    t[0, 0, 0] = -0.0
    t[1, 1, 1] = 5e-324
    t[2, 2, 2] = -5e-324
    path = tmp_path / "t.dott"
    write_tensor(path, t, {"units": "mm,ps"})
    back, meta = read_tensor(path)
    assert back.shape == t.shape
    assert back.tobytes() == t.tobytes()  # bit-exact, distinguishes -0.0
    assert meta["units"] == "mm,ps"


def test_metadata_preserved_verbatim(tmp_path):
    path = tmp_path / "t.dott"
    meta = {"units": "mm,ps", "scan": {"nx": 3}, "seed": 17}
    write_tensor(path, np.ones((2, 2)), meta)
    _, back = read_tensor(path)
    assert back == meta


def test_empty_dims_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_tensor(tmp_path / "t.dott", np.zeros((0, 3)))
    with pytest.raises(ValueError):
        write_tensor(tmp_path / "t.dott", np.float64(3.0))


def test_non_finite_policy(tmp_path):
    path = tmp_path / "t.dott"
    arr = np.array([[np.nan, 1.0]])
    with pytest.raises(NonFiniteError):
        write_tensor(path, arr)
    write_tensor(path, arr, allow_non_finite=True)
    back, _ = read_tensor(path)
    assert np.isnan(back[0, 0])


def test_bad_magic(tmp_path):
    path = tmp_path / "t.dott"
    write_tensor(path, np.ones(3))
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(BadMagicError) as exc:
        read_tensor(path)
    assert exc.value.code == "bad-magic"


def test_truncated(tmp_path):
    path = tmp_path / "t.dott"
    write_tensor(path, np.ones((4, 4)))
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(TruncatedError) as exc:
        read_tensor(path)
    assert exc.value.code == "truncated"


def test_unsupported_version(tmp_path):
    path = tmp_path / "t.dott"
    write_tensor(path, np.ones(3))
    blob = bytearray(path.read_bytes())
    blob[4:6] = struct.pack("<H", 9)
    path.write_bytes(bytes(blob))
    with pytest.raises(UnsupportedVersionError) as exc:
        read_tensor(path)
    assert exc.value.code == "version-unsupported"


def test_bad_metadata_trailer(tmp_path):
    path = tmp_path / "t.dott"
    write_tensor(path, np.ones(2))
    with open(path, "ab") as fh:
        fh.write(b"{not json")
    with pytest.raises(BadMetadataError):
        read_tensor(path)


def test_v1_file_parses(tmp_path):
    path = tmp_path / "t.dott"
    write_tensor(path, np.arange(6.0).reshape(2, 3), {"k": 1})
    arr, meta = read_tensor(path)
    assert arr.tolist() == [[0, 1, 2], [3, 4, 5]]
    assert meta == {"k": 1}
    # header layout is the documented contract
    blob = path.read_bytes()
    assert blob[:4] == b"DOTT"
    version, dtype_code, ndim = struct.unpack("<HBB", blob[4:8])
    assert (version, dtype_code, ndim) == (1, 1, 2)
    assert struct.unpack("<2Q", blob[8:24]) == (2, 3)
