"""``.awck`` checkpoint files.

Layout::

    b"AWAKERCK"               8-byte magic
    <u32 little-endian>       format version
    <u64 little-endian>       manifest length in bytes
    manifest                  UTF-8 JSON, sorted keys, compact separators
    payload                   raw little-endian arrays in manifest order

Each manifest entry records ``name``, ``shape``, ``dtype``, ``byte_offset``
(relative to the payload start) and the ``crc32`` of the array bytes.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from awaker_moe.errors import CheckpointError
from awaker_moe.tensor import OptimizerState, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"AWAKERCK"
FORMAT_VERSION = 1
OPTIM_PREFIX = "optim."

_HEADER = struct.Struct("<8sIQ")


def _decode_entry(payload: memoryview, entry: dict, source: str) -> tuple[str, np.ndarray, int]:
    name = str(entry["name"])
    dtype = np.dtype(entry["dtype"])
    shape = tuple(int(n) for n in entry["shape"])
    if any(n < 0 for n in shape):
        raise ValueError(f"negative dimension in shape {shape}")
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    begin = entry["byte_offset"]
    if not isinstance(begin, int) or begin < 0:
        raise ValueError(f"bad byte_offset {begin!r}")
    raw = bytes(payload[begin : begin + nbytes])
    if len(raw) != nbytes:
        raise CheckpointError(f"{source}: payload truncated at {name}")
    if zlib.crc32(raw) != entry["crc32"]:
        raise CheckpointError(f"{source}: crc32 mismatch for {name}, payload is corrupt")
    return name, np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape), begin + nbytes


def _little_endian(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def _dumps(manifest: Mapping[str, Any]) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class Checkpoint:
    """Manifest metadata plus named arrays.

    Attributes:
        manifest: Everything but ``entries`` (version, model, stage, step, ...).
        arrays: Named arrays in payload order; optimizer moments are named
            ``optim.m.<param>`` and ``optim.v.<param>``.
    """

    manifest: dict[str, Any]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def stage(self) -> int:
        return int(self.manifest.get("stage", -1))

    def parameters(self) -> dict[str, np.ndarray]:
        """Model arrays, without optimizer moments."""
        return {k: v for k, v in self.arrays.items() if not k.startswith(OPTIM_PREFIX)}

    def optimizer_state(self) -> OptimizerState:
        """Rebuild the optimizer (hyperparameters, step and moments)."""
        hyper = dict(self.manifest.get("optimizer") or {})
        state = OptimizerState(
            lr=hyper.get("lr", 1e-3),
            betas=tuple(hyper.get("betas", (0.9, 0.999))),
            eps=hyper.get("eps", 1e-8),
            weight_decay=hyper.get("weight_decay", 0.0),
            step=hyper.get("step", 0),
        )
        for name, arr in self.arrays.items():
            if name.startswith(OPTIM_PREFIX + "m."):
                state.m[name[len(OPTIM_PREFIX) + 2 :]] = arr.copy()
            elif name.startswith(OPTIM_PREFIX + "v."):
                state.v[name[len(OPTIM_PREFIX) + 2 :]] = arr.copy()
        return state

    @classmethod
    def from_state(
        cls,
        manifest: dict[str, Any],
        params: Mapping[str, Tensor],
        optimizer: OptimizerState | None = None,
    ) -> "Checkpoint":
        """Snapshot ``params`` (and the optimizer moments) into a checkpoint."""
        manifest = dict(manifest)
        arrays = {name: p.data.copy() for name, p in params.items()}
        if optimizer is not None:
            manifest["optimizer"] = optimizer.hyperparameters()
            for name in params:
                if name in optimizer.m:
                    arrays[f"{OPTIM_PREFIX}m.{name}"] = optimizer.m[name].copy()
                    arrays[f"{OPTIM_PREFIX}v.{name}"] = optimizer.v[name].copy()
        return cls(manifest, arrays)

    # -- encoding ------------------------------------------------------------

    def to_bytes(self) -> bytes:
        entries = []
        chunks = []
        offset = 0
        for name, arr in self.arrays.items():
            raw = _little_endian(np.asarray(arr)).tobytes()
            entries.append(
                {
                    "name": name,
                    "shape": list(np.shape(arr)),
                    "dtype": np.asarray(arr).dtype.name,
                    "byte_offset": offset,
                    "crc32": zlib.crc32(raw),
                }
            )
            chunks.append(raw)
            offset += len(raw)
        manifest = {**self.manifest, "version": FORMAT_VERSION, "entries": entries}
        body = _dumps(manifest)
        return _HEADER.pack(MAGIC, FORMAT_VERSION, len(body)) + body + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Checkpoint":
        """Decode and verify a checkpoint.

        Raises:
            CheckpointError: On a bad magic or version, an unreadable manifest
                or manifest entry, a truncated payload or a checksum mismatch.
        """
        if len(data) < _HEADER.size:
            raise CheckpointError(f"{source}: file too short for a checkpoint header")
        magic, version, manifest_len = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointError(f"{source}: not an .awck checkpoint (magic {magic!r})")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{source}: unsupported format version {version}")
        start = _HEADER.size
        if len(data) < start + manifest_len:
            raise CheckpointError(f"{source}: truncated manifest")
        try:
            manifest = json.loads(data[start : start + manifest_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{source}: unreadable manifest: {e}") from e
        if not isinstance(manifest, dict) or not isinstance(manifest.get("entries", []), list):
            raise CheckpointError(f"{source}: manifest is not an object with an entry list")

        payload = memoryview(data)[start + manifest_len :]
        arrays: dict[str, np.ndarray] = {}
        expected_end = 0
        for i, entry in enumerate(manifest.pop("entries", [])):
            try:
                name, arr, end = _decode_entry(payload, entry, source)
            except (KeyError, TypeError, ValueError, AttributeError) as e:
                raise CheckpointError(f"{source}: malformed manifest entry {i}: {e!r}") from e
            arrays[name] = arr
            expected_end = max(expected_end, end)
        if len(payload) != expected_end:
            raise CheckpointError(f"{source}: {len(payload) - expected_end} unexpected trailing payload bytes")
        manifest.pop("version", None)
        return cls(manifest, arrays)

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        logger.info("saved checkpoint %s (%d arrays)", path, len(self.arrays))
        return path

    @classmethod
    def load(cls, path: Path) -> "Checkpoint":
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
        return cls.from_bytes(data, source=str(path))


def parameter_checksums(model) -> dict[str, int]:
    """crc32 of every named parameter of ``model`` (base included)."""
    return {name: zlib.crc32(_little_endian(p.data).tobytes()) for name, p in model.parameters().items()}
