import struct
import zlib
from collections import OrderedDict

import numpy as np
import pytest

from qbitalloc.checkpoint import (MAGIC, VERSION, CheckpointError, decode_checkpoint,
                                  encode_checkpoint, load_checkpoint, save_checkpoint)


def tensors(seed=0):
    rng = np.random.default_rng(seed)
    return OrderedDict([("w", rng.standard_normal((3, 2))), ("alpha", np.array(0.25)),
                        ("v", rng.uniform(0, 3, 6)), ("empty", np.zeros((0, 4)))])


META = {"kind": "state", "round": 2, "nested": {"b": [1, 2], "a": None}, "f": 0.1}


def reference_encode(ts, meta):
    """Straight-line encoder written from the layout description."""
    import json
    body = b"GFB1" + struct.pack("<I", 1) + struct.pack("<I", len(ts))
    for name, arr in ts.items():
        arr = np.asarray(arr, dtype=np.float64)
        body += struct.pack("<H", len(name)) + name.encode()
        body += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            body += struct.pack("<I", d)
        for x in arr.ravel():
            body += struct.pack("<d", x)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    body += struct.pack("<I", len(blob)) + blob
    return body + struct.pack("<I", zlib.crc32(body))


class TestFormat:
    def test_matches_reference_layout(self):
        assert encode_checkpoint(tensors(), META) == reference_encode(tensors(), META)

    def test_header(self):
        buf = encode_checkpoint(tensors(), META)
        assert buf[:4] == MAGIC == b"GFB1"
        assert struct.unpack("<I", buf[4:8])[0] == VERSION

    def test_trailer_is_crc(self):
        buf = encode_checkpoint(tensors(), META)
        assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])

    def test_meta_order_irrelevant(self):
        a = encode_checkpoint(tensors(), {"x": 1, "y": 2})
        b = encode_checkpoint(tensors(), {"y": 2, "x": 1})
        assert a == b


class TestRoundTrip:
    def test_decode(self):
        ts, meta = decode_checkpoint(encode_checkpoint(tensors(), META))
        assert list(ts) == list(tensors())
        for name, arr in tensors().items():
            np.testing.assert_array_equal(ts[name], arr)
            assert ts[name].shape == arr.shape
        assert meta == META

    def test_save_load_save_identical(self, tmp_path):
        first = save_checkpoint(tmp_path / "a.gfb", tensors(1), META)
        ts, meta = load_checkpoint(tmp_path / "a.gfb")
        second = save_checkpoint(tmp_path / "b.gfb", ts, meta)
        assert first == second == (tmp_path / "b.gfb").read_bytes()

    def test_special_values_bitwise(self):
        arr = np.array([0.0, -0.0, 5e-324, 1.7976931348623157e308, np.pi])
        ts, _ = decode_checkpoint(encode_checkpoint({"x": arr}, {}))
        assert ts["x"].tobytes() == arr.tobytes()

    def test_no_temp_file_left(self, tmp_path):
        save_checkpoint(tmp_path / "a.gfb", tensors(), META)
        assert [p.name for p in tmp_path.iterdir()] == ["a.gfb"]


class TestCorruption:
    def buf(self):
        return encode_checkpoint(tensors(), META)

    def test_flipped_byte(self):
        b = bytearray(self.buf())
        b[20] ^= 0xFF
        with pytest.raises(CheckpointError, match="checksum"):
            decode_checkpoint(bytes(b))

    def test_every_single_byte_flip_detected(self):
        good = self.buf()
        for i in range(4, len(good)):
            b = bytearray(good)
            b[i] ^= 0x01
            with pytest.raises(CheckpointError):
                decode_checkpoint(bytes(b))

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"XXXX" + self.buf()[4:])

    def test_version_mismatch(self):
        body = bytearray(self.buf()[:-4])
        body[4:8] = struct.pack("<I", 2)
        buf = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
        with pytest.raises(CheckpointError, match="version"):
            decode_checkpoint(buf)

    def test_truncated(self):
        body = self.buf()[:-30]
        with pytest.raises(CheckpointError):
            decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))

    def test_trailing_bytes(self):
        body = self.buf()[:-4] + b"\x00"
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))

    def test_too_short(self):
        with pytest.raises(CheckpointError):
            decode_checkpoint(b"GFB1")
