"""FBT1 wire format and checkpoint archive round-trips."""

import struct

import numpy as np
import pytest

from rgbh.errors import CheckpointCorrupt
from rgbh.tensor import Tensor, dump_fbt, load_checkpoint, load_fbt, save_checkpoint


class TestFbt1:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip(self, dtype):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((2, 3, 4)).astype(dtype)
        back = load_fbt(dump_fbt(arr))
        assert back.dtype == dtype
        np.testing.assert_array_equal(back, arr)

    def test_header_layout(self):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        blob = dump_fbt(arr)
        assert blob[:4] == b"FBT1"
        dtype_code, rank = struct.unpack_from("<BB", blob, 4)
        assert (dtype_code, rank) == (0, 2)
        assert struct.unpack_from("<2Q", blob, 6) == (2, 3)
        payload = np.frombuffer(blob, dtype="<f4", offset=6 + 16)
        np.testing.assert_array_equal(payload.reshape(2, 3), arr)

    def test_scalar_rank_zero(self):
        arr = np.float64(7.5)
        back = load_fbt(dump_fbt(np.asarray(arr)))
        assert back.shape == ()
        assert back == 7.5

    def test_bad_magic(self):
        with pytest.raises(CheckpointCorrupt):
            load_fbt(b"NOPE" + b"\x00" * 16)

    def test_truncated_payload(self):
        blob = dump_fbt(np.ones(4, dtype=np.float32))
        with pytest.raises(CheckpointCorrupt):
            load_fbt(blob[:-2])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        params = {
            "rgb.enc.w": Tensor(rng.standard_normal((4, 3)), dtype=np.float32),
            "fuse.m": Tensor(rng.standard_normal((1, 8)), dtype=np.float64),
        }
        path = tmp_path / "ckpt.zip"
        save_checkpoint(path, params)
        back = load_checkpoint(path)
        assert set(back) == set(params)
        for name in params:
            assert back[name].dtype == params[name].dtype
            np.testing.assert_array_equal(back[name].data, params[name].data)

    def test_identical_params_identical_bytes(self, tmp_path):
        params = {"w": Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))}
        a, b = tmp_path / "a.zip", tmp_path / "b.zip"
        save_checkpoint(a, params)
        save_checkpoint(b, params)
        assert a.read_bytes() == b.read_bytes()

    def test_corrupt_archive(self, tmp_path):
        path = tmp_path / "bad.zip"
        path.write_bytes(b"not a zip at all")
        with pytest.raises(CheckpointCorrupt):
            load_checkpoint(path)
