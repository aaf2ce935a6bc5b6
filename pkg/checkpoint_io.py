"""
PA-EWC Desk Lab - Checkpoint I/O Module

Binary layout shared by parameter checkpoints and Fisher snapshots:

    Magic bytes (4 bytes): b'PAEW'
    Header length (4 bytes, little-endian uint32)
    Header: UTF-8 JSON, sorted keys
        {"version", "kind", "blocks": [{"name", "shape", "group", "offset", "nbytes"}], "meta"}
    Payload: little-endian float64 values of every block, concatenated in header order

Offsets are relative to the start of the payload. Saving, loading and saving
again reproduces the file byte for byte.
"""

import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from errors import (
    CheckpointFormatError, NumericError, ShapeMismatchError, TruncatedPayloadError, VersionMismatchError,
)
from fisher_adaptive import ActivationStats, FisherSnapshot
from toy_model import UNASSIGNED, ParamStore

logger = logging.getLogger(__name__)

MAGIC = b'PAEW'
FORMAT_VERSION = 1
PREAMBLE = struct.Struct('<4sI')
VALUE_DTYPE = np.dtype('<f8')

PathLike = Union[str, Path]


def encode_arrays(kind: str, arrays: "OrderedDict[str, Tuple[np.ndarray, str]]",
                  meta: Optional[Mapping[str, Any]] = None) -> bytes:
    """Serialise named (array, group tag) pairs plus free-form metadata"""
    blocks = []
    chunks = []
    offset = 0
    for name, (values, group) in arrays.items():
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise NumericError(f"block '{name}' contains non-finite values; refusing to write checkpoint")
        raw = values.astype(VALUE_DTYPE).tobytes(order="C")
        blocks.append({"name": name, "shape": list(values.shape), "group": group,
                       "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"version": FORMAT_VERSION, "kind": kind, "blocks": blocks, "meta": dict(meta or {})}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return PREAMBLE.pack(MAGIC, len(header_bytes)) + header_bytes + b"".join(chunks)


def decode_arrays(data: bytes) -> Tuple[str, "OrderedDict[str, Tuple[np.ndarray, str]]", Dict[str, Any]]:
    """
    Parse bytes written by encode_arrays

    Returns:
        (kind, {name -> (array, group)}, meta)
    """
    if len(data) < PREAMBLE.size:
        raise TruncatedPayloadError(f"file too short for the preamble ({len(data)} bytes)")
    magic, header_length = PREAMBLE.unpack(data[:PREAMBLE.size])
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic bytes {magic!r}")
    header_end = PREAMBLE.size + header_length
    if len(data) < header_end:
        raise TruncatedPayloadError("file ends inside the JSON header")
    try:
        header = json.loads(data[PREAMBLE.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"unreadable header: {e}")
    if not isinstance(header, dict) or "version" not in header:
        raise CheckpointFormatError("header is not a versioned object")
    if header["version"] != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {header['version']}, expected {FORMAT_VERSION}")

    payload = data[header_end:]
    arrays: "OrderedDict[str, Tuple[np.ndarray, str]]" = OrderedDict()
    expected_offset = 0
    for block in header.get("blocks", []):
        missing = {"name", "shape", "group", "offset", "nbytes"} - set(block)
        if missing:
            raise CheckpointFormatError(f"block entry {block.get('name', '?')!r} lacks {sorted(missing)}")
        name, shape = block["name"], tuple(block["shape"])
        if block["offset"] != expected_offset:
            raise CheckpointFormatError(f"block '{name}' offset {block['offset']} != expected {expected_offset}")
        count = int(np.prod(shape)) if shape else 1
        if block["nbytes"] != count * VALUE_DTYPE.itemsize:
            raise ShapeMismatchError(f"block '{name}' shape {shape} does not match {block['nbytes']} bytes")
        end = block["offset"] + block["nbytes"]
        if end > len(payload):
            raise TruncatedPayloadError(f"payload ends before block '{name}' ({len(payload)} < {end} bytes)")
        values = np.frombuffer(payload[block["offset"]:end], dtype=VALUE_DTYPE).astype(np.float64).reshape(shape)
        arrays[name] = (values, block["group"])
        expected_offset = end
    if expected_offset != len(payload):
        raise CheckpointFormatError(f"{len(payload) - expected_offset} trailing payload bytes")
    return header.get("kind", ""), arrays, header.get("meta", {})


def _write(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


def save_checkpoint(path: PathLike, params: ParamStore, meta: Optional[Mapping[str, Any]] = None) -> Path:
    arrays = OrderedDict((name, (tensor.data, params.group_of[name])) for name, tensor in params.items())
    path = _write(path, encode_arrays("params", arrays, meta))
    logger.debug(f"Checkpoint written: {path} ({len(arrays)} blocks)")
    return path


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, str], Dict[str, Any]]:
    """Read a parameter checkpoint as (values, group tags, meta)"""
    kind, arrays, meta = decode_arrays(Path(path).read_bytes())
    if kind != "params":
        raise CheckpointFormatError(f"{path} holds '{kind}' data, not a parameter checkpoint")
    values = {name: array for name, (array, _) in arrays.items()}
    groups = {name: group for name, (_, group) in arrays.items()}
    return values, groups, meta


def restore_checkpoint(path: PathLike, params: ParamStore) -> Dict[str, Any]:
    """Load a checkpoint into an existing ParamStore whose architecture must match"""
    values, groups, meta = load_checkpoint(path)
    if set(values) != set(params.names):
        raise ShapeMismatchError(f"checkpoint blocks {sorted(set(values) ^ set(params.names))} do not match the model")
    for name, tensor in params.items():
        if values[name].shape != tensor.shape:
            raise ShapeMismatchError(f"block '{name}': checkpoint {values[name].shape} vs model {tensor.shape}")
    params.load_values(values)
    params.assign_groups(groups)
    return meta


def save_snapshot(path: PathLike, snapshot: FisherSnapshot) -> Path:
    arrays: "OrderedDict[str, Tuple[np.ndarray, str]]" = OrderedDict()
    for name, fisher in snapshot.per_block_fisher.items():
        group = snapshot.group_of.get(name, UNASSIGNED)
        arrays[f"fisher/{name}"] = (fisher, group)
        arrays[f"anchor/{name}"] = (snapshot.anchor[name], group)
    meta = {
        "task_id": snapshot.task_id,
        "method": snapshot.method,
        "group_of": snapshot.group_of,
        "group_weight": snapshot.group_weight,
        "stability": snapshot.stability,
        "similarity": snapshot.similarity,
        "complexity": snapshot.complexity,
        "activation": ({"layers": list(snapshot.activation.layers),
                        "per_layer": [list(pair) for pair in snapshot.activation.per_layer]}
                       if snapshot.activation else None),
    }
    return _write(path, encode_arrays("fisher", arrays, meta))


def load_snapshot(path: PathLike) -> FisherSnapshot:
    kind, arrays, meta = decode_arrays(Path(path).read_bytes())
    if kind != "fisher":
        raise CheckpointFormatError(f"{path} holds '{kind}' data, not a Fisher snapshot")
    fisher = {name[len("fisher/"):]: array for name, (array, _) in arrays.items() if name.startswith("fisher/")}
    anchor = {name[len("anchor/"):]: array for name, (array, _) in arrays.items() if name.startswith("anchor/")}
    if set(fisher) != set(anchor):
        raise CheckpointFormatError("snapshot fisher and anchor blocks differ")
    activation = None
    if meta.get("activation"):
        activation = ActivationStats(per_layer=tuple(tuple(pair) for pair in meta["activation"]["per_layer"]),
                                     layers=tuple(meta["activation"]["layers"]))
    return FisherSnapshot(
        task_id=meta["task_id"], per_block_fisher=fisher, anchor=anchor, group_of=meta["group_of"],
        group_weight=meta["group_weight"], stability=meta["stability"], similarity=meta["similarity"],
        complexity=meta["complexity"], method=meta["method"], activation=activation,
    )
