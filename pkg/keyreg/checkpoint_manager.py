"""Descriptor network checkpoints in the UKDC binary format.

Layout (little-endian)::

    b"UKDC" | u32 version | u32 D | u32 metadata length | metadata JSON (utf-8)
    | float32 tensor data in metadata["tensors"] order | u32 CRC32 of all preceding bytes

The metadata JSON carries the network widths, input channels, training
config hash, epoch count and the name and shape of every tensor.
"""

import json
import logging
import os
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

from .descriptor import DescriptorNet, NetworkParams
from .errors import CheckpointError

MAGIC = b"UKDC"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_CRC = struct.Struct("<I")


class CheckpointManager:
    """Saves and loads descriptor networks."""

    def __init__(self, logger: Optional[logging.Logger] = None):
        """Initialize the checkpoint manager.

        Args:
            logger: Optional logger instance
        """
        self.logger = logger or logging.getLogger(__name__)

    def encode(self, params: NetworkParams) -> bytes:
        """Serialize a network to UKDC bytes."""
        state = params.net.state_dict()
        metadata = dict(params.metadata)
        metadata["widths"] = list(params.net.widths)
        metadata["in_channels"] = params.net.in_channels
        metadata["dim"] = params.net.dim
        metadata["tensors"] = [[name, list(t.shape)] for name, t in state.items()]
        meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
        body = bytearray(_HEADER.pack(MAGIC, VERSION, params.net.dim, len(meta)))
        body += meta
        for t in state.values():
            body += np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()
        body += _CRC.pack(zlib.crc32(bytes(body)) & 0xFFFFFFFF)
        return bytes(body)

    def decode(self, raw: bytes) -> NetworkParams:
        """Rebuild a network from UKDC bytes.

        Raises:
            CheckpointError: bad magic, version, CRC or tensor layout
        """
        if len(raw) < _HEADER.size + _CRC.size:
            raise CheckpointError("Checkpoint is truncated")
        (crc,) = _CRC.unpack_from(raw, len(raw) - _CRC.size)
        if zlib.crc32(raw[:-_CRC.size]) & 0xFFFFFFFF != crc:
            raise CheckpointError("Checkpoint CRC mismatch")
        magic, version, dim, meta_len = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise CheckpointError(f"Bad checkpoint magic {magic!r}")
        if version != VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {version}")
        offset = _HEADER.size
        try:
            metadata = json.loads(raw[offset:offset + meta_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"Checkpoint metadata unreadable: {e}") from e
        offset += meta_len

        try:
            tensors = metadata["tensors"]
            net = DescriptorNet(metadata["widths"], dim, metadata.get("in_channels", 3))
        except KeyError as e:
            raise CheckpointError(f"Checkpoint metadata lacks {e}") from e
        except (TypeError, ValueError) as e:
            raise CheckpointError(f"Checkpoint metadata describes no valid network: {e}") from e
        expected = net.state_dict()
        state = OrderedDict()
        data_end = len(raw) - _CRC.size
        for name, shape in tensors:
            if name not in expected or list(expected[name].shape) != list(shape):
                raise CheckpointError(f"Tensor {name} {shape} does not fit the network")
            count = int(np.prod(shape)) if shape else 1
            nbytes = 4 * count
            if offset + nbytes > data_end:
                raise CheckpointError("Checkpoint tensor data truncated")
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(np.float32)
            state[name] = torch.from_numpy(arr.reshape(shape).copy())
            offset += nbytes
        if offset != data_end:
            raise CheckpointError("Trailing bytes after checkpoint tensors")
        net.load_state_dict(state)
        metadata.pop("tensors", None)
        return NetworkParams(net, metadata)

    def save(self, path: Path, params: NetworkParams) -> Path:
        """Write a checkpoint atomically (temp file then rename)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(self.encode(params))
        os.replace(tmp, path)
        self.logger.debug(f"Checkpoint written to {path}")
        return path

    def load(self, path: Path) -> NetworkParams:
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as e:
            raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
        params = self.decode(raw)
        self.logger.info(
            f"Loaded checkpoint {path.name}: D={params.dim}, widths={list(params.net.widths)}, "
            f"epochs={params.metadata.get('epochs', 0)}"
        )
        return params

    def verify(self, path: Path) -> Tuple[bool, str]:
        """Check that a checkpoint file is readable.

        Returns:
            Tuple of (success, message)
        """
        try:
            params = self.decode(Path(path).read_bytes())
        except (OSError, CheckpointError) as e:
            return False, str(e)
        return True, f"D={params.dim}, epochs={params.metadata.get('epochs', 0)}"
