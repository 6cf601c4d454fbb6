"""Checkpoint container shared by the generator and the discriminator.

Layout, all integers little-endian::

    b"LINRCKPT"            8-byte magic
    u32 format version     currently 1
    u32 header length      bytes of the JSON header that follows
    JSON header            utf-8, keys sorted
    payload                every tensor as '<f4', concatenated

The header holds one entry list per tensor section ("hypernet", "disc"), each
entry ``{"name", "shape", "offset", "count"}`` with offsets counted in floats
from the start of the payload.  "mlp_spec" carries what
:meth:`Generator.from_description` needs; "config", "seed" and "epoch" record
the run that produced the file.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from app.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"LINRCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<II")


@dataclass
class Checkpoint:
    hypernet: Dict[str, np.ndarray]
    mlp_spec: Dict[str, Any]
    disc: Dict[str, np.ndarray] = field(default_factory=dict)
    disc_config: Optional[Dict[str, Any]] = None
    config: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    epoch: int = 0

    def generator(self):
        from app.generator import Generator

        return Generator.from_description(self.mlp_spec, self.hypernet)

    def discriminator(self):
        from app.discriminator import Discriminator
        from app.schemas import DiscConfig

        if self.disc_config is None or not self.disc:
            raise CheckpointError("checkpoint carries no discriminator section")
        disc = Discriminator(DiscConfig.model_validate(self.disc_config))
        disc.load_state_dict(self.disc)
        return disc


def _pack(section: Mapping[str, np.ndarray], offset: int, chunks: List[bytes]) -> Tuple[List[dict], int]:
    entries = []
    for name in sorted(section):
        arr = np.ascontiguousarray(section[name], dtype="<f4")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor '{name}' holds non-finite values")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    return entries, offset


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    path = Path(path)
    chunks: List[bytes] = []
    tensors: Dict[str, List[dict]] = {}
    offset = 0
    tensors["hypernet"], offset = _pack(ckpt.hypernet, offset, chunks)
    tensors["disc"], offset = _pack(ckpt.disc, offset, chunks)
    header = {
        "tensors": tensors,
        "mlp_spec": ckpt.mlp_spec,
        "disc_config": ckpt.disc_config,
        "config": ckpt.config,
        "seed": int(ckpt.seed),
        "epoch": int(ckpt.epoch),
    }
    raw_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_PREFIX.pack(FORMAT_VERSION, len(raw_header)))
        fh.write(raw_header)
        for chunk in chunks:
            fh.write(chunk)
    tmp.replace(path)
    logger.debug("checkpoint written to %s (%d floats)", path, offset)
    return path


def _unpack(entries: List[dict], payload: bytes, total: int) -> Dict[str, np.ndarray]:
    out = {}
    for entry in entries:
        name, count, offset = entry["name"], int(entry["count"]), int(entry["offset"])
        shape = tuple(int(d) for d in entry["shape"])
        if int(np.prod(shape, dtype=np.int64)) != count or offset < 0 or offset + count > total:
            raise CheckpointError(f"tensor '{name}' has an inconsistent header entry")
        out[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset * 4).reshape(shape).copy()
    return out


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + _PREFIX.size or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, header_len = _PREFIX.unpack_from(blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + _PREFIX.size
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = blob[start + header_len:]
    if len(payload) % 4:
        raise CheckpointError("payload is not a whole number of float32 values")
    total = len(payload) // 4
    try:
        tensors = header["tensors"]
        if "mlp_spec" not in header or not tensors.get("hypernet"):
            raise CheckpointError("checkpoint lacks the hypernet or mlp_spec section")
        return Checkpoint(
            hypernet=_unpack(tensors["hypernet"], payload, total),
            disc=_unpack(tensors.get("disc", []), payload, total),
            mlp_spec=header["mlp_spec"],
            disc_config=header.get("disc_config"),
            config=header.get("config") or {},
            seed=int(header.get("seed", 0)),
            epoch=int(header.get("epoch", 0)),
        )
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from None
