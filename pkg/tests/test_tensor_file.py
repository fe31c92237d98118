import struct

import numpy as np
import pytest

from keypatch.errors import TensorFormatError
from keypatch.model.tensor_file import (
    MAGIC,
    decode_meta,
    encode_meta,
    load_tensor_file,
    save_tensor_file,
)


class TestTensorFile:
    def test_layout_is_bit_exact(self, tmp_path):
        path = tmp_path / "a.vslt"
        save_tensor_file(path, {"w": np.array([[1.0, 2.0]], dtype=np.float32)})
        expected = (MAGIC + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"w"
                    + struct.pack("<B", 2) + struct.pack("<2I", 1, 2) + struct.pack("<2f", 1.0, 2.0))
        assert path.read_bytes() == expected

    def test_load_preserves_entries(self, tmp_path, rng):
        tensors = {
            "meta": encode_meta({"kind": "attention", "layers": 2}),
            "attn/L0/H0": rng.random((3, 3)).astype(np.float32),
            "scalar": np.float32(4.5),
        }
        path = tmp_path / "b.vslt"
        save_tensor_file(path, tensors)
        loaded = load_tensor_file(path)
        assert list(loaded) == list(tensors)
        np.testing.assert_array_equal(loaded["attn/L0/H0"], tensors["attn/L0/H0"])
        assert loaded["scalar"].shape == ()
        assert decode_meta(loaded) == {"kind": "attention", "layers": 2}

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "c.vslt"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(TensorFormatError) as exc:
            load_tensor_file(path)
        assert exc.value.offset == 0

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "v.vslt"
        path.write_bytes(MAGIC + struct.pack("<II", 7, 0))
        with pytest.raises(TensorFormatError) as exc:
            load_tensor_file(path)
        assert exc.value.offset == 4

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "d.vslt"
        save_tensor_file(path, {"x": np.zeros((4, 4), dtype=np.float32)})
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(TensorFormatError, match="declares 16 elements") as exc:
            load_tensor_file(path)
        # payload starts after magic, header, name length, name, rank and two dims
        assert exc.value.offset == 4 + 8 + 2 + 1 + 1 + 8

    def test_dimension_overflow(self, tmp_path):
        path = tmp_path / "e.vslt"
        path.write_bytes(MAGIC + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"x"
                         + struct.pack("<B", 2) + struct.pack("<2I", 0xFFFFFFFF, 0xFFFFFFFF))
        with pytest.raises(TensorFormatError):
            load_tensor_file(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "f.vslt"
        save_tensor_file(path, {"x": np.zeros(2, dtype=np.float32)})
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(TensorFormatError, match="trailing"):
            load_tensor_file(path)

    def test_missing_meta(self):
        with pytest.raises(TensorFormatError):
            decode_meta({"x": np.zeros(1, dtype=np.float32)})
