"""Binary tensor format FBT1 and the flat checkpoint archive.

FBT1 layout (little-endian throughout):

    magic   4 bytes  "FBT1"
    dtype   u8       0 = float32, 1 = float64
    rank    u8
    extents rank x u64
    payload row-major values

Checkpoints are zip archives holding one "<name>.fbt" entry per tensor
plus "manifest.json" mapping name -> {"shape": [...], "dtype": "f32"|"f64"}.
Zip entry timestamps are fixed so identical parameter sets produce
identical archives.
"""

from __future__ import annotations

import io
import json
import struct
import zipfile
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from ..errors import CheckpointCorrupt
from .autodiff import Tensor

MAGIC = b"FBT1"
_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_NAME = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def dump_fbt(arr: np.ndarray) -> bytes:
    """Serialize a float32/float64 array to FBT1 bytes."""
    arr = np.asarray(arr)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODE:
        raise CheckpointCorrupt(f"FBT1 stores f32/f64 only, got {arr.dtype}")
    head = MAGIC + struct.pack("<BB", _DTYPE_CODE[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def load_fbt(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise CheckpointCorrupt("bad FBT1 magic")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _CODE_DTYPE:
        raise CheckpointCorrupt(f"unknown FBT1 dtype code {code}")
    shape = struct.unpack_from(f"<{rank}Q", blob, 6)
    dtype = _CODE_DTYPE[code]
    offset = 6 + 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(blob) != expected:
        raise CheckpointCorrupt(f"FBT1 payload length {len(blob)} != expected {expected}")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def write_fbt(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dump_fbt(arr))


def read_fbt(path) -> np.ndarray:
    return load_fbt(Path(path).read_bytes())


def save_checkpoint(path, params: Mapping[str, Tensor], meta: Optional[dict] = None) -> None:
    """Write named tensors as a flat FBT1 zip archive with a JSON manifest.

    meta, when given, is stored as an extra "meta.json" entry (the harness
    keeps the model recipe there so a checkpoint is self-describing).
    """
    manifest = {
        name: {"shape": list(t.shape), "dtype": _DTYPE_NAME[t.dtype]}
        for name, t in sorted(params.items())
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(manifest, indent=1, sort_keys=True))
        if meta is not None:
            info = zipfile.ZipInfo("meta.json", date_time=_ZIP_DATE)
            zf.writestr(info, json.dumps(meta, indent=1, sort_keys=True))
        for name, t in sorted(params.items()):
            info = zipfile.ZipInfo(f"{name}.fbt", date_time=_ZIP_DATE)
            zf.writestr(info, dump_fbt(t.data))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint_meta(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            if "meta.json" not in zf.namelist():
                raise CheckpointCorrupt(f"checkpoint {path} carries no meta.json")
            return json.loads(zf.read("meta.json"))
    except (OSError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointCorrupt(f"cannot read checkpoint {path}: {exc}") from exc


def load_checkpoint(path, requires_grad: bool = False) -> dict:
    """Load a checkpoint archive back into {name: Tensor}."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            params = {}
            for name, meta in manifest.items():
                arr = load_fbt(zf.read(f"{name}.fbt"))
                if list(arr.shape) != meta["shape"]:
                    raise CheckpointCorrupt(
                        f"{name}: manifest shape {meta['shape']} != payload {list(arr.shape)}"
                    )
                params[name] = Tensor(arr, requires_grad=requires_grad)
            return params
    except (KeyError, OSError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointCorrupt(f"cannot read checkpoint {path}: {exc}") from exc
