"""Binary model file format.

Layout, little-endian throughout::

    header        magic b"SPAQ", version u32, descriptor length u32,
                  tensor count u32, quant entry count u32, output digest (32 bytes)
    descriptor    compact JSON: nodes, attrs, edges, inputs, outputs, precision
    tensor table  per tensor: name (u16 length + utf-8), dtype code u8, rank u8,
                  extents u32 * rank, absolute byte offset u64
    quant table   per entry: name (u16 length + utf-8), scheme code u8,
                  group count u32, then (scale f32, zero_point i32) per group
    payload       tensor data, contiguous, in tensor-table order

The digest is a SHA-256 over graph outputs on a fixed probe input; the payload
itself carries no checksum.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from typing import Dict, List, Tuple

import numpy as np

from .graph import InputSpec, LayerNode, ModelGraph, validate

MAGIC = b"SPAQ"
VERSION = 1
HEADER = struct.Struct("<4sIIII32s")
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("i1"): 1, np.dtype("<i4"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
SCHEME_CODES = {"asymmetric-per-tensor": 0, "symmetric-per-channel": 1, "symmetric-per-tensor": 2}
CODE_SCHEMES = {v: k for k, v in SCHEME_CODES.items()}
NO_DIGEST = bytes(32)


class ModelFileError(ValueError):
    pass


class BadMagicError(ModelFileError):
    pass


class UnsupportedVersionError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


class OffsetOverlapError(ModelFileError):
    pass


def tensor_name(node_id: str, param: str) -> str:
    return f"{node_id}/{param}"


def descriptor(graph: ModelGraph) -> bytes:
    doc = {
        "name": graph.name,
        "precision": graph.precision,
        "inputs": [[k, s.channels, s.stride] for k, s in graph.inputs.items()],
        "outputs": list(graph.outputs),
        "nodes": [{"id": n.id, "kind": n.kind, "attrs": n.attrs, "inputs": n.inputs,
                   "params": list(n.params)} for n in graph.nodes],
    }
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def _tensor_entry_size(name: str, rank: int) -> int:
    return 2 + len(name.encode("utf-8")) + 2 + 4 * rank + 8


def _quant_entry_size(name: str, groups: int) -> int:
    return 2 + len(name.encode("utf-8")) + 1 + 4 + 8 * groups


def _stored_dtype(value: np.ndarray) -> np.dtype:
    dt = np.dtype(value.dtype).newbyteorder("<") if value.dtype.itemsize > 1 else np.dtype(value.dtype)
    if dt not in DTYPE_CODES:
        raise ModelFileError(f"dtype {value.dtype} cannot be stored (fp32, int8 and int32 only)")
    return dt


def layout(graph: ModelGraph) -> Dict[str, int]:
    """Byte count of every file section; the sum is the exact file size."""
    desc = descriptor(graph)
    tensors = sum(_tensor_entry_size(tensor_name(nid, p), v.ndim) for nid, p, v in graph.parameters())
    quant = sum(_quant_entry_size(name, len(rec.scale)) for name, rec in graph.quant.items())
    payload = 0
    for _, _, v in graph.parameters():
        payload += v.size * _stored_dtype(v).itemsize
    return {"header": HEADER.size, "descriptor": len(desc), "tensor_table": tensors,
            "quant_table": quant, "payload": payload}


def probe_inputs(graph: ModelGraph) -> Dict[str, np.ndarray]:
    stride = max([s.stride for s in graph.inputs.values()] + [1])
    rng = np.random.default_rng(0)
    return {k: rng.standard_normal(s).astype(np.float32)
            for k, s in graph.input_shapes((8 * stride, 8 * stride)).items()}


def output_digest(graph: ModelGraph) -> bytes:
    if not graph.nodes:
        return NO_DIGEST
    if graph.precision == "int8":
        from .quantize import quantized_forward
        outs = quantized_forward(graph, probe_inputs(graph))
    else:
        from .engine import forward
        outs = forward(graph, probe_inputs(graph))
    h = hashlib.sha256()
    for k in graph.outputs:
        h.update(np.ascontiguousarray(outs[k], dtype="<f4").tobytes())
    return h.digest()


def to_bytes(graph: ModelGraph, digest: bool = True) -> bytes:
    desc = descriptor(graph)
    params = list(graph.parameters())
    sizes = layout(graph)
    offset = sizes["header"] + sizes["descriptor"] + sizes["tensor_table"] + sizes["quant_table"]

    table, payload = [], []
    for nid, p, v in params:
        name = tensor_name(nid, p).encode("utf-8")
        dt = _stored_dtype(v)
        table.append(struct.pack("<H", len(name)) + name + struct.pack("<BB", DTYPE_CODES[dt], v.ndim)
                     + struct.pack(f"<{v.ndim}I", *v.shape) + struct.pack("<Q", offset))
        data = np.ascontiguousarray(v, dtype=dt).tobytes()
        payload.append(data)
        offset += len(data)

    quant = []
    for name, rec in graph.quant.items():
        raw = name.encode("utf-8")
        scale = np.asarray(rec.scale, dtype="<f4")
        zp = np.asarray(rec.zero_point, dtype="<i4")
        groups = np.empty(len(scale), dtype=[("s", "<f4"), ("z", "<i4")])
        groups["s"], groups["z"] = scale, zp
        quant.append(struct.pack("<H", len(raw)) + raw
                     + struct.pack("<BI", SCHEME_CODES[rec.scheme], len(scale)) + groups.tobytes())

    dig = output_digest(graph) if digest else NO_DIGEST
    head = HEADER.pack(MAGIC, VERSION, len(desc), len(params), len(graph.quant), dig)
    return b"".join([head, desc, *table, *quant, *payload])


def save(graph: ModelGraph, path, digest: bool = True) -> int:
    """Write atomically (temp file + rename); returns bytes written."""
    data = to_bytes(graph, digest)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".spaq-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def from_bytes(data: bytes) -> Tuple[ModelGraph, bytes]:
    """Decode a model file; returns the graph and the stored digest."""
    from .quantize import QuantRecord

    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a SPAQ model file")
    r = _Reader(data)
    _, version, desc_len, n_tensors, n_quant, dig = HEADER.unpack(r.take(HEADER.size))
    if version != VERSION:
        raise UnsupportedVersionError(f"format version {version} is not supported (expected {VERSION})")
    doc = json.loads(r.take(desc_len).decode("utf-8"))

    entries = []
    for _ in range(n_tensors):
        name = r.name()
        code, rank = r.unpack("<BB")
        if code not in CODE_DTYPES:
            raise ModelFileError(f"tensor {name!r}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}I")
        (offset,) = r.unpack("<Q")
        entries.append((name, CODE_DTYPES[code], shape, offset))

    quant = {}
    for _ in range(n_quant):
        name = r.name()
        code, groups = r.unpack("<BI")
        if code not in CODE_SCHEMES:
            raise ModelFileError(f"quant entry {name!r}: unknown scheme code {code}")
        arr = np.frombuffer(r.take(8 * groups), dtype=[("s", "<f4"), ("z", "<i4")])
        quant[name] = QuantRecord(scale=arr["s"].astype(np.float32), zero_point=arr["z"].astype(np.int32),
                                  scheme=CODE_SCHEMES[code])

    tensors = {}
    spans: List[Tuple[int, int, str]] = []
    for name, dt, shape, offset in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset < r.pos:
            raise OffsetOverlapError(f"tensor {name!r} starts inside the file tables")
        if offset + nbytes > len(data):
            raise TruncatedFileError(f"tensor {name!r} runs past the end of the file")
        spans.append((offset, offset + nbytes, name))
        tensors[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=offset) \
            .reshape(shape).astype(dt.newbyteorder("="))
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise OffsetOverlapError(f"tensors {n0!r} and {n1!r} overlap")

    nodes = []
    for nd in doc["nodes"]:
        params = {}
        for p in nd["params"]:
            key = tensor_name(nd["id"], p)
            if key not in tensors:
                raise ModelFileError(f"parameter {key!r} has no tensor-table entry")
            params[p] = tensors[key]
        nodes.append(LayerNode(nd["id"], nd["kind"], nd["attrs"], params, nd["inputs"]))
    graph = ModelGraph(nodes, {k: InputSpec(c, s) for k, c, s in doc["inputs"]}, doc["outputs"],
                       name=doc["name"], precision=doc["precision"], quant=quant)
    return validate(graph), dig


def load(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())[0]


def verify(path) -> bool:
    """Recompute the output digest and compare it with the stored one."""
    with open(path, "rb") as fh:
        graph, dig = from_bytes(fh.read())
    if dig == NO_DIGEST:
        raise ModelFileError("file carries no output digest")
    return output_digest(graph) == dig


def graphs_equal(a: ModelGraph, b: ModelGraph) -> bool:
    """Bit-level equality of topology, attributes, parameters and quant records."""
    if descriptor(a) != descriptor(b):
        return False
    for (n1, p1, v1), (n2, p2, v2) in zip(a.parameters(), b.parameters()):
        if (n1, p1) != (n2, p2) or v1.dtype != v2.dtype or v1.shape != v2.shape or v1.tobytes() != v2.tobytes():
            return False
    if list(a.quant) != list(b.quant):
        return False
    for k, r in a.quant.items():
        o = b.quant[k]
        if r.scheme != o.scheme or np.asarray(r.scale, "<f4").tobytes() != np.asarray(o.scale, "<f4").tobytes() \
                or np.asarray(r.zero_point, "<i4").tobytes() != np.asarray(o.zero_point, "<i4").tobytes():
            return False
    return True
