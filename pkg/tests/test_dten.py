"""DTEN file format and checkpoint container tests."""

import numpy as np
import pytest

from dimnas import dten


class TestDtenFormat:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        for shape in [(3,), (2, 4), (1, 2, 3, 4)]:
            arr = rng.standard_normal(shape).astype(np.float32)
            path = tmp_path / "a.dten"
            dten.write_dten(path, arr)
            back = dten.read_dten(path)
            assert back.shape == arr.shape
            assert np.array_equal(back, arr)

    def test_header_layout(self, tmp_path):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        path = tmp_path / "a.dten"
        dten.write_dten(path, arr)
        blob = path.read_bytes()
        assert blob[:5] == b"DTEN1"
        assert blob[5] == 2
        assert int.from_bytes(blob[6:10], "little") == 2
        assert int.from_bytes(blob[10:14], "little") == 3
        assert len(blob) == 14 + 4 * 6

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.dten"
        path.write_bytes(b"NOPE1\x01" + b"\x00" * 8)
        with pytest.raises(dten.DtenError, match="magic"):
            dten.read_dten(path)

    def test_truncated_payload_rejected(self, tmp_path):
        arr = np.zeros(4, dtype=np.float32)
        path = tmp_path / "a.dten"
        dten.write_dten(path, arr)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(dten.DtenError, match="bytes"):
            dten.read_dten(path)


class TestCheckpointContainer:
    def test_save_load_arrays(self, tmp_path, rng):
        arrays = {"a.w": rng.standard_normal((2, 3)).astype(np.float32),
                  "b.bias": rng.standard_normal(4).astype(np.float32)}
        dten.save_arrays(tmp_path / "ck", arrays, {"note": 7})
        back, meta = dten.load_arrays(tmp_path / "ck")
        assert meta == {"note": 7}
        assert set(back) == set(arrays)
        for k in arrays:
            assert np.array_equal(back[k], arrays[k])

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(dten.DtenError, match="manifest"):
            dten.load_arrays(tmp_path)

    def test_shape_mismatch_detected(self, tmp_path, rng):
        dten.save_arrays(tmp_path / "ck", {"a": np.zeros((2, 2), np.float32)}, {})
        dten.write_dten(tmp_path / "ck" / "a.dten", np.zeros((3,), np.float32))
        with pytest.raises(dten.DtenError, match="shape"):
            dten.load_arrays(tmp_path / "ck")
