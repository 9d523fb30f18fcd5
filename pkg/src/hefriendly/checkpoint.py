"""Versioned checkpoint container.

Layout (all integers little-endian)::

    b"HEFCKPT\\n"                 8-byte magic
    uint32 format version         currently 1
    uint64 header length N
    N bytes of UTF-8 JSON         {"graph", "metadata", "tensors"}
    float64 payload               every tensor's flat row-major values, in
                                  header order

Each header tensor entry is ``{"name", "shape", "offset", "count"}`` where
offset and count are measured in float64 elements. The JSON is written with
sorted keys and no whitespace so that load -> save reproduces the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .activations import ActivationKind, PolyCoeffs
from .autodiff.tensor import Tensor
from .errors import CheckpointError
from .graph.model import ModelGraph

MAGIC = b"HEFCKPT\n"
FORMAT_VERSION = 1


def _collect(graph: ModelGraph) -> list:
    items = []
    for node in graph.nodes:
        for key, t in node.params.items():
            items.append((f"{node.name}.{key}", t.data))
        for key, arr in node.buffers.items():
            items.append((f"{node.name}.{key}", np.asarray(arr, dtype=np.float64)))
        act = node.activation
        if act is not None and act.coeffs is not None:
            items.append((f"{node.name}.a", act.coeffs.a.data))
            items.append((f"{node.name}.b", act.coeffs.b.data))
    return items


def dumps(graph: ModelGraph, metadata: dict | None = None) -> bytes:
    if graph.is_abstract:
        raise CheckpointError(f"graph {graph.name!r} has no weights to save")
    entries, chunks, offset = [], [], 0
    for name, arr in _collect(graph):
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(flat.size)})
        chunks.append(flat.tobytes())
        offset += flat.size
    header = {"graph": graph.to_config(), "metadata": metadata or {}, "tensors": entries}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)) + blob + b"".join(chunks)


def loads(data: bytes):
    """Parse checkpoint bytes into ``(graph, metadata)``."""
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    try:
        version, n = struct.unpack_from("<IQ", data, pos)
    except struct.error:
        raise CheckpointError("truncated checkpoint header") from None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    try:
        header = json.loads(data[pos:pos + n].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = np.frombuffer(data, dtype="<f8", offset=pos + n)
    arrays = {}
    for e in header["tensors"]:
        end = e["offset"] + e["count"]
        if end > payload.size:
            raise CheckpointError(f"tensor {e['name']} runs past the end of the payload")
        arrays[e["name"]] = payload[e["offset"]:end].astype(np.float64).reshape(e["shape"])
    graph = ModelGraph.from_config(header["graph"])
    for node in graph.nodes:
        if node.kind == "conv2d" or node.kind == "dense":
            keys = ("weight", "bias")
        elif node.kind == "batch_norm":
            keys = ("gamma", "beta")
        else:
            keys = ()
        for key in keys:
            node.params[key] = Tensor(_take(arrays, f"{node.name}.{key}"), requires_grad=True,
                                      name=f"{node.name}.{key}")
        if node.kind == "batch_norm":
            node.buffers["running_mean"] = _take(arrays, f"{node.name}.running_mean")
            node.buffers["running_var"] = _take(arrays, f"{node.name}.running_var")
        if node.kind == "conv2d" and f"{node.name}.pad_value" in arrays:
            node.buffers["pad_value"] = arrays.pop(f"{node.name}.pad_value")
        act = node.activation
        if act is not None and act.kind in (ActivationKind.TRAINABLE_POLY, ActivationKind.WEIGHTED):
            a = _take(arrays, f"{node.name}.a")
            b = _take(arrays, f"{node.name}.b")
            act.coeffs = PolyCoeffs(Tensor(a, requires_grad=True, name=f"{node.name}.a"),
                                    Tensor(b, requires_grad=True, name=f"{node.name}.b"))
    if arrays:
        raise CheckpointError(f"checkpoint holds tensors no layer claims: {sorted(arrays)}")
    return graph, header["metadata"]


def _take(arrays: dict, name: str) -> np.ndarray:
    try:
        return arrays.pop(name)
    except KeyError:
        raise CheckpointError(f"checkpoint is missing tensor {name}") from None


def save_checkpoint(graph: ModelGraph, path, metadata: dict | None = None) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(dumps(graph, metadata))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from None
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return loads(data)
