"""Versioned checkpoint container.

Layout (all text lines are UTF-8, newline terminated)::

    SDFLOW-CKPT
    version 1
    config <n>
    <key>=<value>            n lines, sorted by key
    arrays <m>
    array <name> float32 <ndim> <dim>... <nbytes>
    <nbytes of little-endian float32>\n      repeated m times
    checksum sha256 <hex of everything above>
"""
import hashlib
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping

import numpy as np

from models.errors import CheckpointError

# Set up logger
logger = logging.getLogger(__name__)

MAGIC = b"SDFLOW-CKPT"
FORMAT_VERSION = 1
_CHECKSUM_PREFIX = b"checksum sha256 "
_ARRAY_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    config: Dict[str, str] = field(default_factory=dict)
    version: int = FORMAT_VERSION
    checksum: str = ""

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        """Arrays under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {name[cut:]: arr for name, arr in self.arrays.items() if name.startswith(prefix + ".")}


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple, np.ndarray)):
        return ",".join(format_value(v.item() if hasattr(v, "item") else v) for v in value)
    if hasattr(value, "value"):
        return str(value.value)
    if value is None:
        return "none"
    return str(value)


def encode_checkpoint(arrays: Mapping[str, np.ndarray], config: Mapping[str, Any]) -> bytes:
    parts = [MAGIC + b"\n", f"version {FORMAT_VERSION}\n".encode()]
    parts.append(f"config {len(config)}\n".encode())
    for key in sorted(config):
        value = format_value(config[key])
        if "\n" in key or "=" in key or "\n" in value:
            raise CheckpointError(f"config entry {key!r} cannot be stored")
        parts.append(f"{key}={value}\n".encode("utf-8"))
    parts.append(f"arrays {len(arrays)}\n".encode())
    for name, arr in arrays.items():
        if not name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"invalid array name {name!r}")
        payload = np.ascontiguousarray(arr, dtype=_ARRAY_DTYPE).tobytes()
        dims = " ".join(str(d) for d in np.shape(arr))
        header = f"array {name} float32 {np.ndim(arr)}{' ' + dims if dims else ''} {len(payload)}\n"
        parts.append(header.encode())
        parts.append(payload)
        parts.append(b"\n")
    body = b"".join(parts)
    digest = hashlib.sha256(body).hexdigest()
    return body + _CHECKSUM_PREFIX + digest.encode() + b"\n"


def save_checkpoint(path: str, arrays: Mapping[str, np.ndarray], config: Mapping[str, Any]) -> str:
    """Write the container and return its sha256 digest."""
    blob = encode_checkpoint(arrays, config)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(blob)
    digest = hashlib.sha256(blob).hexdigest()
    logger.info(f"Wrote checkpoint {path} ({len(arrays)} arrays, sha256 {digest[:12]})")
    return digest


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def line(self) -> str:
        end = self.data.find(b"\n", self.pos)
        if end < 0:
            raise CheckpointError("checkpoint is truncated")
        text = self.data[self.pos:end]
        self.pos = end + 1
        try:
            return text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"checkpoint header is not valid text: {str(e)}")

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def decode_checkpoint(data: bytes) -> Checkpoint:
    if not data.startswith(MAGIC + b"\n"):
        raise CheckpointError("bad magic: not an SDFLOW checkpoint")
    reader = _Reader(data)
    reader.line()
    version_line = reader.line().split()
    if len(version_line) != 2 or version_line[0] != "version" or not version_line[1].isdigit():
        raise CheckpointError("malformed version line")
    version = int(version_line[1])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")

    mark = data.rfind(_CHECKSUM_PREFIX)
    if mark < 0:
        raise CheckpointError("checkpoint is truncated (no checksum)")
    stored = data[mark + len(_CHECKSUM_PREFIX):].strip().decode("ascii", errors="replace")
    actual = hashlib.sha256(data[:mark]).hexdigest()
    if stored != actual:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")

    reader.data = data[:mark]
    try:
        tag, count = reader.line().split()
        if tag != "config":
            raise CheckpointError("missing config block")
        config = {}
        for _ in range(int(count)):
            key, _, value = reader.line().partition("=")
            config[key] = value
        tag, count = reader.line().split()
        if tag != "arrays":
            raise CheckpointError("missing array block")
        arrays = {}
        for _ in range(int(count)):
            fields = reader.line().split()
            if fields[0] != "array" or fields[2] != "float32":
                raise CheckpointError(f"malformed array header {' '.join(fields)}")
            name, ndim = fields[1], int(fields[3])
            shape = tuple(int(d) for d in fields[4:4 + ndim])
            nbytes = int(fields[4 + ndim])
            payload = reader.take(nbytes)
            if reader.take(1) != b"\n":
                raise CheckpointError(f"array {name} payload is not terminated")
            arr = np.frombuffer(payload, dtype=_ARRAY_DTYPE).astype(np.float32)
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"array {name} has {arr.size} values for shape {shape}")
            arrays[name] = arr.reshape(shape)
    except (ValueError, IndexError) as e:
        raise CheckpointError(f"malformed checkpoint: {str(e)}")
    return Checkpoint(arrays=arrays, config=config, version=version, checksum=actual)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        logger.error(f"Cannot read checkpoint {path}: {str(e)}")
        raise CheckpointError(f"cannot read checkpoint {path}: {str(e)}")
    try:
        ckpt = decode_checkpoint(data)
    except CheckpointError as e:
        logger.error(f"Failed to load checkpoint {path}: {str(e)}")
        raise
    logger.info(f"Loaded checkpoint {path} ({len(ckpt.arrays)} arrays)")
    return ckpt


def file_sha256(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def arrays_fingerprint(arrays: Mapping[str, np.ndarray]) -> str:
    """Digest of named arrays in their float32 on-disk representation."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype=_ARRAY_DTYPE).tobytes())
    return h.hexdigest()
