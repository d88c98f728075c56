"""
SPN model files.

Two containers hold the same tables. The JSON document (``SpnDocument``) is
canonical and used for fixtures. The binary container is for large
networks::

    b"TPNSPN" | uint16 version | uint32 header length | JSON header
    | int8 kinds[n] | int32 variable[n] | int32 value[n]
    | int64 child_ptr[n + 1] | int64 children[e] | float64 weights[e]

All integers are little-endian and the header keys are sorted, so equal
networks serialize to equal bytes.
"""

import json
import logging
from pathlib import Path
from typing import Union

import numpy as np
from pydantic import ValidationError

from toponets.errors import SpnFormatError, StructureError
from toponets.models import SPN_VERSION, NodeKindName, SpnDocument, SpnNodeRecord, SpnVariable
from toponets.spn import NodeKind, Spn, VarId

logger = logging.getLogger(__name__)

MAGIC = b"TPNSPN"
BINARY_VERSION = 1

_KIND_NAMES = {NodeKind.INDICATOR: NodeKindName.INDICATOR, NodeKind.SUM: NodeKindName.SUM,
               NodeKind.PRODUCT: NodeKindName.PRODUCT}
_KIND_CODES = {name: code for code, name in _KIND_NAMES.items()}

_ARRAYS = (
    ("kinds", "<i1", "nodes"),
    ("ind_var", "<i4", "nodes"),
    ("ind_value", "<i4", "nodes"),
    ("child_ptr", "<i8", "ptr"),
    ("children", "<i8", "edges"),
    ("weights", "<f8", "edges"),
)


def to_document(spn: Spn) -> SpnDocument:
    records = []
    for i in range(spn.num_nodes):
        node = spn.node(i)
        if node.kind == NodeKind.INDICATOR:
            records.append(SpnNodeRecord(id=i, kind=NodeKindName.INDICATOR,
                                         variable=node.variable, value=node.value))
        else:
            records.append(SpnNodeRecord(id=i, kind=_KIND_NAMES[node.kind],
                                         children=list(node.children), weights=list(node.weights)))
    return SpnDocument(
        variables=[SpnVariable(index=v.index, cardinality=v.cardinality) for v in spn.variables],
        nodes=records,
        root=spn.root,
    )


def from_document(doc: SpnDocument) -> Spn:
    if doc.version != SPN_VERSION:
        raise SpnFormatError(f"unsupported version {doc.version}")
    variables = tuple(VarId(v.index, v.cardinality) for v in doc.variables)
    n = len(doc.nodes)
    kinds = np.zeros(n, dtype=np.int8)
    ind_var = np.full(n, -1, dtype=np.int64)
    ind_value = np.full(n, -1, dtype=np.int64)
    ptr = np.zeros(n + 1, dtype=np.int64)
    children, weights = [], []
    for i, record in enumerate(doc.nodes):
        if record.id != i:
            raise SpnFormatError(f"expected id {i}, got {record.id}", node_index=i)
        kinds[i] = _KIND_CODES[record.kind]
        if record.kind == NodeKindName.INDICATOR:
            if not 0 <= record.variable < len(variables):
                raise SpnFormatError(f"unknown variable {record.variable}", node_index=i)
            if not 0 <= record.value < variables[record.variable].cardinality:
                raise SpnFormatError(f"value {record.value} out of range", node_index=i)
            ind_var[i], ind_value[i] = record.variable, record.value
        for c in record.children:
            if not 0 <= c < i:
                raise SpnFormatError(f"child {c} does not precede its parent", node_index=i)
        children.extend(record.children)
        if record.kind == NodeKindName.SUM:
            weights.extend(record.weights)
        else:
            weights.extend([1.0] * len(record.children))
        ptr[i + 1] = len(children)
    if doc.root >= n:
        raise SpnFormatError(f"root {doc.root} out of range")
    try:
        return Spn(kinds, ind_var, ind_value, ptr, np.asarray(children, dtype=np.int64),
                   np.asarray(weights, dtype=np.float64), doc.root, variables)
    except StructureError as exc:
        raise SpnFormatError(str(exc)) from exc


def dumps_json(spn: Spn) -> bytes:
    return to_document(spn).model_dump_json().encode("utf-8")


def loads_json(payload: Union[bytes, str]) -> Spn:
    try:
        doc = SpnDocument.model_validate_json(payload)
    except ValidationError as exc:
        error = exc.errors()[0]
        raise SpnFormatError(f"{error['msg']} at {'.'.join(str(p) for p in error['loc'])}",
                             node_index=_node_index(error["loc"])) from exc
    return from_document(doc)


def _node_index(loc):
    for key, nxt in zip(loc, loc[1:]):
        if key == "nodes" and isinstance(nxt, int):
            return nxt
    return None


def dumps_binary(spn: Spn) -> bytes:
    header = json.dumps({
        "cardinalities": [v.cardinality for v in spn.variables],
        "edges": spn.num_edges,
        "nodes": spn.num_nodes,
        "root": spn.root,
    }, sort_keys=True).encode("utf-8")
    parts = [MAGIC, np.array([BINARY_VERSION], "<u2").tobytes(),
             np.array([len(header)], "<u4").tobytes(), header]
    for name, dtype, _ in _ARRAYS:
        parts.append(np.ascontiguousarray(getattr(spn, name), dtype=dtype).tobytes())
    return b"".join(parts)


def loads_binary(payload: bytes) -> Spn:
    view = memoryview(payload)
    if bytes(view[:len(MAGIC)]) != MAGIC:
        raise SpnFormatError("not a binary SPN container")
    pos = len(MAGIC)
    if len(view) < pos + 6:
        raise SpnFormatError("truncated payload (header)")
    version = int(np.frombuffer(view[pos:pos + 2], "<u2")[0])
    if version != BINARY_VERSION:
        raise SpnFormatError(f"unsupported version {version}")
    header_len = int(np.frombuffer(view[pos + 2:pos + 6], "<u4")[0])
    pos += 6
    if len(view) < pos + header_len:
        raise SpnFormatError("truncated payload (header)")
    try:
        header = json.loads(bytes(view[pos:pos + header_len]))
    except ValueError as exc:
        raise SpnFormatError("unreadable header") from exc
    pos += header_len
    sizes = {"nodes": header["nodes"], "ptr": header["nodes"] + 1, "edges": header["edges"]}
    tables = {}
    for name, dtype, size_key in _ARRAYS:
        nbytes = sizes[size_key] * np.dtype(dtype).itemsize
        if len(view) < pos + nbytes:
            raise SpnFormatError(f"truncated payload ({name})")
        tables[name] = np.frombuffer(view[pos:pos + nbytes], dtype).astype(np.dtype(dtype).newbyteorder("="))
        pos += nbytes
    if pos != len(view):
        raise SpnFormatError(f"{len(view) - pos} trailing bytes")
    bad = _first_bad_node(tables)
    if bad is not None:
        raise SpnFormatError("child does not precede its parent", node_index=bad)
    variables = tuple(VarId(i, c) for i, c in enumerate(header["cardinalities"]))
    try:
        return Spn(tables["kinds"], tables["ind_var"], tables["ind_value"], tables["child_ptr"],
                   tables["children"], tables["weights"], header["root"], variables)
    except StructureError as exc:
        raise SpnFormatError(str(exc)) from exc


def _first_bad_node(tables):
    ptr, children = tables["child_ptr"], tables["children"]
    n = len(tables["kinds"])
    if len(ptr) == 0 or ptr[0] != 0 or ptr[-1] != len(children) or np.any(np.diff(ptr) < 0):
        return None
    parent = np.repeat(np.arange(n), np.diff(ptr))
    bad = (children < 0) | (children >= parent)
    if np.any(bad):
        return int(parent[bad][0])
    return None


def serialize(spn: Spn, fmt: str = "binary") -> bytes:
    if fmt == "json":
        return dumps_json(spn)
    if fmt == "binary":
        return dumps_binary(spn)
    raise ValueError(f"unknown format {fmt!r}")


def deserialize(payload: bytes) -> Spn:
    """Parse either container; the magic bytes select the format."""
    if payload[:len(MAGIC)] == MAGIC:
        return loads_binary(payload)
    return loads_json(payload)


def save_spn(spn: Spn, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_bytes(serialize(spn, "json" if path.suffix == ".json" else "binary"))
    logger.debug("wrote %r to %s", spn, path)
    return path


def load_spn(path: Union[str, Path]) -> Spn:
    return deserialize(Path(path).read_bytes())
