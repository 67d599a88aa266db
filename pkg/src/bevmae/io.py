"""Raw scan files and the checkpoint container.

Scans are headerless little-endian float32 ``x, y, z, intensity`` records
(16 bytes each), as in KITTI/nuScenes ``.bin`` dumps.

Checkpoint layout (all integers little-endian)::

    b"BVMA" | u32 version | u32 len | descriptor (UTF-8 JSON, sorted keys)
    u32 n_entries
    per entry: u16 len | name | u8 dtype | u8 ndim | u32 * ndim shape | raw data

Entries are written in sorted name order, so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud

log = logging.getLogger(__name__)

MAGIC = b"BVMA"
FORMAT_VERSION = 1
_RECORD = np.dtype("<f4")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v.str: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


class ScanFormatError(ValueError):
    pass


def read_bin_records(path) -> tuple[PointCloud, int]:
    """Parse a scan file; returns the cloud and the number of rejected records."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise ScanFormatError(f"{path}: {len(raw)} bytes is not a whole number of 16-byte records")
    rec = np.frombuffer(raw, dtype=_RECORD).reshape(-1, 4)
    ok = np.all(np.isfinite(rec), axis=1)
    rejected = int((~ok).sum())
    if rejected:
        log.warning("%s: rejected %d non-finite records", path, rejected)
    rec = rec[ok].astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3], frame_id=str(path)), rejected


def load_bin_cloud(path) -> PointCloud:
    return read_bin_records(path)[0]


def save_bin_cloud(cloud: PointCloud, path) -> None:
    rec = np.column_stack([cloud.xyz, cloud.intensity]).astype(_RECORD)
    Path(path).write_bytes(rec.tobytes())


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    descriptor: dict
    tensors: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def step(self) -> int:
        return int(self.descriptor.get("step", 0))

    @property
    def kind(self) -> str:
        return self.descriptor.get("kind", "pretrain")

    def to_bytes(self) -> bytes:
        desc = json.dumps(self.descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out = [MAGIC, struct.pack("<II", self.version, len(desc)), desc, struct.pack("<I", len(self.tensors))]
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name])
            code = _CODES.get(arr.dtype.newbyteorder("<").str)
            if code is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            bname = name.encode("utf-8")
            out.append(struct.pack("<H", len(bname)) + bname)
            out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError("not a BVMA checkpoint")
        try:
            version, dlen = struct.unpack_from("<II", data, 4)
            if version != FORMAT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            pos = 12
            desc = json.loads(data[pos:pos + dlen].decode("utf-8"))
            pos += dlen
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            tensors = {}
            for _ in range(n):
                (nlen,) = struct.unpack_from("<H", data, pos)
                pos += 2
                name = data[pos:pos + nlen].decode("utf-8")
                pos += nlen
                code, ndim = struct.unpack_from("<BB", data, pos)
                pos += 2
                shape = struct.unpack_from(f"<{ndim}I", data, pos)
                pos += 4 * ndim
                dt = _DTYPES[code]
                count = int(np.prod(shape)) if ndim else 1
                nbytes = count * dt.itemsize
                if pos + nbytes > len(data):
                    raise CheckpointError(f"truncated data for {name!r}")
                tensors[name] = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(shape).copy()
                pos += nbytes
        except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
        if pos != len(data):
            raise CheckpointError("trailing bytes after last entry")
        return cls(desc, tensors, version)

    def save(self, path) -> Path:
        _atomic_write(Path(path), self.to_bytes())
        return Path(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def export_encoder(ckpt: Checkpoint) -> Checkpoint:
    """Encoder weights only: drops decoder, heads, token and optimizer state."""
    keep = {k: v for k, v in ckpt.tensors.items() if k.startswith("encoder.")}
    desc = {k: v for k, v in ckpt.descriptor.items() if k not in ("decoder", "optimizer", "losses")}
    desc["kind"] = "encoder"
    return Checkpoint(desc, keep, ckpt.version)
