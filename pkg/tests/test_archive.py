import json
import struct

import numpy as np
import pytest
import torch

from driftdecode.archive import MAGIC, ArchiveError, load_archive, read_manifest, save_archive


def test_round_trip_preserves_values_dtypes_and_order(tmp_path):
    tensors = {
        "b": torch.arange(6, dtype=torch.float32).reshape(2, 3),
        "a": torch.tensor([1.5, -2.0], dtype=torch.float64),
        "idx": torch.tensor([3, -7], dtype=torch.int64),
        "img": np.arange(4, dtype=np.uint8),
        "scalar": torch.tensor(2.0),
    }
    path = save_archive(tmp_path / "x.ntar", tensors, {"mean": [0.5]})
    out, meta = load_archive(path)
    assert list(out) == list(tensors)
    assert meta == {"mean": [0.5]}
    for name, ref in tensors.items():
        ref = torch.as_tensor(ref)
        assert out[name].dtype == ref.dtype and torch.equal(out[name], ref)


def test_documented_byte_layout(tmp_path):
    path = save_archive(tmp_path / "x.ntar", {"w": torch.tensor([1.0, 2.0], dtype=torch.float32)})
    blob = path.read_bytes()
    assert blob[:8] == MAGIC
    (length,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16 : 16 + length])
    assert manifest["tensors"] == [{"name": "w", "dtype": "float32", "shape": [2], "offset": 0, "nbytes": 8}]
    assert blob[16 + length :] == np.array([1.0, 2.0], dtype="<f4").tobytes()
    assert read_manifest(path)["_data_start"] == 16 + length


def test_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(ArchiveError, match="unsupported dtype"):
        save_archive(tmp_path / "x.ntar", {"h": torch.zeros(2, dtype=torch.float16)})


def test_bad_magic_truncation_and_missing_file(tmp_path):
    bad = tmp_path / "bad.ntar"
    bad.write_bytes(b"NOTANARCHIVE" * 2)
    with pytest.raises(ArchiveError, match="bad magic"):
        load_archive(bad)
    path = save_archive(tmp_path / "x.ntar", {"w": torch.zeros(100)})
    cut = tmp_path / "cut.ntar"
    cut.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ArchiveError, match="truncated"):
        load_archive(cut)
    with pytest.raises(ArchiveError, match="cannot read"):
        load_archive(tmp_path / "missing.ntar")
    assert isinstance(ArchiveError("x"), IOError)
