"""Minimal ONNX reader/writer working directly on the protobuf wire format.

Only the message fields needed to describe plain CNN graphs are interpreted
(nodes, attributes, initializers, graph input/output value infos, opset).
Everything else is skipped following the protobuf skipping rules, so files
produced by stock exporters decode without the ``onnx`` package.

Field numbers follow ``onnx/onnx.proto``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterator, Union

from .errors import (
    AttrKindMismatch,
    MalformedWire,
    MissingGraph,
    UnsupportedDtype,
    UnsupportedFeature,
)

VARINT, FIXED64, LEN, SGROUP, EGROUP, FIXED32 = 0, 1, 2, 3, 4, 5

# TensorProto.DataType codes we accept
DTYPES = {1: "float32", 3: "int8", 6: "int32", 7: "int64"}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}
ELEMENT_SIZE = {"float32": 4, "int8": 1, "int32": 4, "int64": 8}

# AttributeProto.AttributeType
A_FLOAT, A_INT, A_STRING, A_TENSOR, A_GRAPH, A_FLOATS, A_INTS, A_STRINGS = 1, 2, 3, 4, 5, 6, 7, 8

AttrValue = Union[int, float, str, tuple]

_MAX_DEPTH = 32


@dataclass(frozen=True)
class RawTensor:
    name: str
    dims: tuple[int, ...]
    dtype: str
    payload: bytes

    def __post_init__(self):
        if self.dtype not in ELEMENT_SIZE:
            raise UnsupportedDtype(f"tensor {self.name!r}: dtype {self.dtype!r}")
        if any(d < 0 for d in self.dims):
            raise MalformedWire(f"tensor {self.name!r}: negative dimension in {self.dims}")
        expected = ELEMENT_SIZE[self.dtype] * math.prod(self.dims)
        if len(self.payload) != expected:
            raise MalformedWire(
                f"tensor {self.name!r}: payload is {len(self.payload)} bytes, "
                f"dims {self.dims} need {expected}"
            )

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    def to_numpy(self):
        import numpy as np

        dt = np.dtype(self.dtype).newbyteorder("<")
        return np.frombuffer(self.payload, dtype=dt).astype(self.dtype).reshape(self.dims)

    @classmethod
    def from_numpy(cls, name: str, array) -> "RawTensor":
        import numpy as np

        array = np.asarray(array)
        dtype = str(array.dtype)
        if dtype not in ELEMENT_SIZE:
            raise UnsupportedDtype(f"tensor {name!r}: dtype {dtype!r}")
        payload = array.astype(np.dtype(dtype).newbyteorder("<")).tobytes()
        return cls(name, tuple(int(d) for d in array.shape), dtype, payload)


@dataclass(frozen=True)
class RawNode:
    op_type: str
    name: str = ""
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.op_type:
            raise MalformedWire(f"node {self.name!r} has an empty op_type")

    @property
    def label(self) -> str:
        return self.name or f"<{self.op_type} -> {', '.join(self.outputs)}>"


@dataclass
class RawGraph:
    nodes: list[RawNode] = field(default_factory=list)
    initializers: dict[str, RawTensor] = field(default_factory=dict)
    graph_inputs: list[tuple[str, tuple]] = field(default_factory=list)
    graph_outputs: list[tuple[str, tuple]] = field(default_factory=list)
    name: str = ""
    opset: int | None = None
    diagnostics: list[str] = field(default_factory=list, compare=False)


# --------------------------------------------------------------------------
# wire-level reading


def _varint(buf: memoryview, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    end = len(buf)
    while True:
        if pos >= end:
            raise MalformedWire("truncated varint")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift >= 70:
            raise MalformedWire("varint longer than 10 bytes")


def _signed64(v: int) -> int:
    v &= (1 << 64) - 1
    return v - (1 << 64) if v & (1 << 63) else v


def _skip_group(buf: memoryview, pos: int, number: int, depth: int) -> int:
    if depth > _MAX_DEPTH:
        raise MalformedWire("groups nested too deeply")
    while True:
        tag, pos = _varint(buf, pos)
        fnum, wt = tag >> 3, tag & 7
        if wt == EGROUP:
            if fnum != number:
                raise MalformedWire("mismatched end-group tag")
            return pos
        pos = _skip(buf, pos, fnum, wt, depth + 1)


def _skip(buf: memoryview, pos: int, number: int, wt: int, depth: int = 0) -> int:
    if wt == VARINT:
        _, pos = _varint(buf, pos)
    elif wt == FIXED64:
        pos += 8
    elif wt == FIXED32:
        pos += 4
    elif wt == LEN:
        n, pos = _varint(buf, pos)
        pos += n
    elif wt == SGROUP:
        pos = _skip_group(buf, pos, number, depth)
    else:
        raise MalformedWire(f"invalid wire type {wt}")
    if pos > len(buf):
        raise MalformedWire("field runs past end of message")
    return pos


def _fields(buf: memoryview, known: set[int]) -> Iterator[tuple[int, int, object]]:
    """Yield (field number, wire type, value) for the known fields of a message."""
    pos = 0
    end = len(buf)
    while pos < end:
        tag, pos = _varint(buf, pos)
        number, wt = tag >> 3, tag & 7
        if number == 0:
            raise MalformedWire("field number 0")
        if number not in known:
            pos = _skip(buf, pos, number, wt)
            continue
        if wt == VARINT:
            value, pos = _varint(buf, pos)
        elif wt == FIXED32:
            if pos + 4 > end:
                raise MalformedWire("truncated fixed32")
            value = bytes(buf[pos:pos + 4])
            pos += 4
        elif wt == FIXED64:
            if pos + 8 > end:
                raise MalformedWire("truncated fixed64")
            value = bytes(buf[pos:pos + 8])
            pos += 8
        elif wt == LEN:
            n, pos = _varint(buf, pos)
            if pos + n > end:
                raise MalformedWire(f"length-delimited field {number} overruns its message")
            value = buf[pos:pos + n]
            pos += n
        elif wt == SGROUP:
            pos = _skip_group(buf, pos, number, 0)
            raise MalformedWire(f"field {number} encoded as a group")
        else:
            raise MalformedWire(f"invalid wire type {wt}")
        yield number, wt, value


def _expect(wt: int, want: int, what: str) -> None:
    if wt != want:
        raise MalformedWire(f"{what}: wire type {wt}, expected {want}")


def _text(value, what: str) -> str:
    try:
        return bytes(value).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedWire(f"{what}: invalid utf-8") from exc


def _ints(wt: int, value, out: list, what: str) -> None:
    # repeated int64 field, packed or not
    if wt == VARINT:
        out.append(_signed64(value))
    elif wt == LEN:
        pos = 0
        while pos < len(value):
            v, pos = _varint(value, pos)
            out.append(_signed64(v))
    else:
        raise MalformedWire(f"{what}: wire type {wt} for integer list")


def _floats(wt: int, value, out: list, what: str) -> None:
    if wt == FIXED32:
        out.append(struct.unpack("<f", value)[0])
    elif wt == LEN:
        if len(value) % 4:
            raise MalformedWire(f"{what}: packed float length not a multiple of 4")
        out.extend(struct.unpack(f"<{len(value) // 4}f", value))
    else:
        raise MalformedWire(f"{what}: wire type {wt} for float list")


# --------------------------------------------------------------------------
# message decoders


def _decode_tensor(buf: memoryview) -> RawTensor:
    dims: list[int] = []
    dtype_code = 0
    name = ""
    raw: bytes | None = None
    floats: list[float] = []
    int32s: list[int] = []
    int64s: list[int] = []
    external = False
    for number, wt, value in _fields(buf, {1, 2, 4, 5, 7, 8, 9, 13, 14}):
        if number == 1:
            _ints(wt, value, dims, "TensorProto.dims")
        elif number == 2:
            _expect(wt, VARINT, "TensorProto.data_type")
            dtype_code = value
        elif number == 4:
            _floats(wt, value, floats, "TensorProto.float_data")
        elif number == 5:
            _ints(wt, value, int32s, "TensorProto.int32_data")
        elif number == 7:
            _ints(wt, value, int64s, "TensorProto.int64_data")
        elif number == 8:
            _expect(wt, LEN, "TensorProto.name")
            name = _text(value, "TensorProto.name")
        elif number == 9:
            _expect(wt, LEN, "TensorProto.raw_data")
            raw = bytes(value)
        elif number == 13:
            external = True
        elif number == 14:
            _expect(wt, VARINT, "TensorProto.data_location")
            external = external or value == 1
    if external:
        raise UnsupportedFeature(f"tensor {name!r} uses external data")
    if dtype_code not in DTYPES:
        raise UnsupportedDtype(f"tensor {name!r}: data_type {dtype_code}")
    dtype = DTYPES[dtype_code]
    if any(d < 0 for d in dims):
        raise MalformedWire(f"tensor {name!r}: negative dimension")
    count = math.prod(dims)
    if raw is None:
        if dtype == "float32":
            values, fmt = floats, "f"
        elif dtype == "int64":
            values, fmt = int64s, "q"
        else:
            values, fmt = int32s, "b" if dtype == "int8" else "i"
        if len(values) != count:
            raise MalformedWire(f"tensor {name!r}: {len(values)} elements for dims {dims}")
        try:
            raw = struct.pack(f"<{count}{fmt}", *values)
        except struct.error as exc:
            raise MalformedWire(f"tensor {name!r}: element out of range for {dtype}") from exc
    return RawTensor(name, tuple(dims), dtype, raw)


def _decode_attribute(buf: memoryview, diagnostics: list[str]) -> tuple[str, AttrValue | None]:
    name = ""
    kind = 0
    f = i = s = None
    floats: list[float] = []
    ints: list[int] = []
    strings: list[str] = []
    has_tensor = False
    for number, wt, value in _fields(buf, {1, 2, 3, 4, 5, 6, 7, 8, 9, 20}):
        if number == 1:
            _expect(wt, LEN, "AttributeProto.name")
            name = _text(value, "AttributeProto.name")
        elif number == 2:
            _expect(wt, FIXED32, "AttributeProto.f")
            f = struct.unpack("<f", value)[0]
        elif number == 3:
            _expect(wt, VARINT, "AttributeProto.i")
            i = _signed64(value)
        elif number == 4:
            _expect(wt, LEN, "AttributeProto.s")
            s = _text(value, "AttributeProto.s")
        elif number in (5, 6):
            _expect(wt, LEN, "AttributeProto.t/g")
            has_tensor = True
        elif number == 7:
            _floats(wt, value, floats, "AttributeProto.floats")
        elif number == 8:
            _ints(wt, value, ints, "AttributeProto.ints")
        elif number == 9:
            _expect(wt, LEN, "AttributeProto.strings")
            strings.append(_text(value, "AttributeProto.strings"))
        elif number == 20:
            _expect(wt, VARINT, "AttributeProto.type")
            kind = value
    if not kind:
        # pre-IR-v2 files leave the type out; infer it from the populated field
        if i is not None:
            kind = A_INT
        elif f is not None:
            kind = A_FLOAT
        elif s is not None:
            kind = A_STRING
        elif ints:
            kind = A_INTS
        elif floats:
            kind = A_FLOATS
        elif strings:
            kind = A_STRINGS
        elif has_tensor:
            kind = A_TENSOR
    if kind == A_INT:
        return name, i if i is not None else 0
    if kind == A_FLOAT:
        return name, f if f is not None else 0.0
    if kind == A_STRING:
        return name, s if s is not None else ""
    if kind == A_INTS:
        return name, tuple(ints)
    if kind == A_FLOATS:
        return name, tuple(floats)
    if kind == A_STRINGS:
        return name, tuple(strings)
    diagnostics.append(f"attribute {name!r} of kind {kind} ignored")
    return name, None


def _decode_node(buf: memoryview, diagnostics: list[str]) -> RawNode:
    inputs: list[str] = []
    outputs: list[str] = []
    name = op_type = domain = ""
    attrs: dict[str, AttrValue] = {}
    for number, wt, value in _fields(buf, {1, 2, 3, 4, 5, 7}):
        _expect(wt, LEN, f"NodeProto field {number}")
        if number == 1:
            inputs.append(_text(value, "NodeProto.input"))
        elif number == 2:
            outputs.append(_text(value, "NodeProto.output"))
        elif number == 3:
            name = _text(value, "NodeProto.name")
        elif number == 4:
            op_type = _text(value, "NodeProto.op_type")
        elif number == 5:
            key, val = _decode_attribute(value, diagnostics)
            if val is not None:
                attrs[key] = val
        elif number == 7:
            domain = _text(value, "NodeProto.domain")
    if domain not in ("", "ai.onnx"):
        diagnostics.append(f"node {name or op_type!r} is in domain {domain!r}")
    return RawNode(op_type, name, tuple(inputs), tuple(outputs), attrs)


def _decode_value_info(buf: memoryview) -> tuple[str, tuple]:
    name = ""
    dims: list = []
    for number, wt, value in _fields(buf, {1, 2}):
        _expect(wt, LEN, f"ValueInfoProto field {number}")
        if number == 1:
            name = _text(value, "ValueInfoProto.name")
        else:
            # TypeProto.tensor_type(1) -> shape(2) -> dim(1) -> dim_value(1)|dim_param(2)
            for n1, w1, v1 in _fields(value, {1}):
                _expect(w1, LEN, "TypeProto.tensor_type")
                for n2, w2, v2 in _fields(v1, {2}):
                    _expect(w2, LEN, "TypeProto.Tensor.shape")
                    for n3, w3, v3 in _fields(v2, {1}):
                        _expect(w3, LEN, "TensorShapeProto.dim")
                        dim = None
                        for n4, w4, v4 in _fields(v3, {1}):
                            _expect(w4, VARINT, "Dimension.dim_value")
                            dim = _signed64(v4)
                        dims.append(dim)
    return name, tuple(dims)


def _decode_graph(buf: memoryview, graph: RawGraph) -> None:
    for number, wt, value in _fields(buf, {1, 2, 5, 11, 12}):
        _expect(wt, LEN, f"GraphProto field {number}")
        if number == 1:
            graph.nodes.append(_decode_node(value, graph.diagnostics))
        elif number == 2:
            graph.name = _text(value, "GraphProto.name")
        elif number == 5:
            t = _decode_tensor(value)
            graph.initializers[t.name] = t
        elif number == 11:
            graph.graph_inputs.append(_decode_value_info(value))
        elif number == 12:
            graph.graph_outputs.append(_decode_value_info(value))


def decode_model(data: bytes) -> RawGraph:
    """Decode the bytes of an ``.onnx`` file into a :class:`RawGraph`."""
    buf = memoryview(bytes(data))
    graph_chunks = []
    opset = None
    for number, wt, value in _fields(buf, {7, 8}):
        _expect(wt, LEN, f"ModelProto field {number}")
        if number == 7:
            graph_chunks.append(bytes(value))
        else:
            domain, version = "", None
            for n, w, v in _fields(value, {1, 2}):
                if n == 1:
                    _expect(w, LEN, "OperatorSetIdProto.domain")
                    domain = _text(v, "OperatorSetIdProto.domain")
                else:
                    _expect(w, VARINT, "OperatorSetIdProto.version")
                    version = _signed64(v)
            if domain in ("", "ai.onnx"):
                opset = version
    if not graph_chunks:
        raise MissingGraph("no GraphProto in model")
    graph = RawGraph(opset=opset)
    # repeated occurrences of an embedded message merge as if concatenated
    _decode_graph(memoryview(b"".join(graph_chunks)), graph)

    if opset is not None and not 7 <= opset <= 13:
        graph.diagnostics.append(f"opset {opset} outside the tested range 7-13")
    used = {name for node in graph.nodes for name in node.inputs}
    for name in graph.initializers:
        if name not in used:
            graph.diagnostics.append(f"orphan initializer {name!r}")
    return graph


def load_model(path) -> RawGraph:
    with open(path, "rb") as fh:
        return decode_model(fh.read())


# --------------------------------------------------------------------------
# writing


def _enc_varint(v: int) -> bytes:
    v &= (1 << 64) - 1
    out = bytearray()
    while True:
        b = v & 0x7F
        v >>= 7
        if v:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _tag(number: int, wt: int) -> bytes:
    return _enc_varint(number << 3 | wt)


def _len_field(number: int, payload: bytes) -> bytes:
    return _tag(number, LEN) + _enc_varint(len(payload)) + payload


def _str_field(number: int, text: str) -> bytes:
    return _len_field(number, text.encode("utf-8"))


def _int_field(number: int, v: int) -> bytes:
    return _tag(number, VARINT) + _enc_varint(v)


def _encode_attribute(name: str, value: AttrValue) -> bytes:
    out = _str_field(1, name)
    if isinstance(value, bool) or isinstance(value, int):
        out += _int_field(3, int(value)) + _int_field(20, A_INT)
    elif isinstance(value, float):
        out += _tag(2, FIXED32) + struct.pack("<f", value) + _int_field(20, A_FLOAT)
    elif isinstance(value, str):
        out += _len_field(4, value.encode("utf-8")) + _int_field(20, A_STRING)
    elif isinstance(value, (tuple, list)):
        items = list(value)
        if items and all(isinstance(x, str) for x in items):
            out += b"".join(_len_field(9, x.encode("utf-8")) for x in items)
            out += _int_field(20, A_STRINGS)
        elif items and any(isinstance(x, float) for x in items):
            out += _len_field(7, struct.pack(f"<{len(items)}f", *items)) + _int_field(20, A_FLOATS)
        else:
            out += _len_field(8, b"".join(_enc_varint(int(x)) for x in items))
            out += _int_field(20, A_INTS)
    else:
        raise TypeError(f"cannot encode attribute {name!r} of type {type(value).__name__}")
    return out


def _encode_node(node: RawNode) -> bytes:
    out = b"".join(_str_field(1, x) for x in node.inputs)
    out += b"".join(_str_field(2, x) for x in node.outputs)
    if node.name:
        out += _str_field(3, node.name)
    out += _str_field(4, node.op_type)
    out += b"".join(_len_field(5, _encode_attribute(k, v)) for k, v in node.attributes.items())
    return out


def _encode_tensor(t: RawTensor) -> bytes:
    out = _len_field(1, b"".join(_enc_varint(d) for d in t.dims)) if t.dims else b""
    out += _int_field(2, DTYPE_CODES[t.dtype])
    out += _str_field(8, t.name)
    out += _len_field(9, t.payload)
    return out


def _encode_value_info(name: str, dims: tuple, elem_type: int = 1) -> bytes:
    dim_msgs = b"".join(
        _len_field(1, _str_field(2, "N") if d is None else _int_field(1, d)) for d in dims
    )
    tensor_type = _int_field(1, elem_type) + _len_field(2, dim_msgs)
    return _str_field(1, name) + _len_field(2, _len_field(1, tensor_type))


def encode_model(graph: RawGraph, ir_version: int = 7, producer: str = "cnnfit") -> bytes:
    """Serialize a RawGraph back to ONNX wire format (raw_data tensors)."""
    g = b"".join(_len_field(1, _encode_node(n)) for n in graph.nodes)
    g += _str_field(2, graph.name or "graph")
    g += b"".join(_len_field(5, _encode_tensor(t)) for t in graph.initializers.values())
    g += b"".join(_len_field(11, _encode_value_info(n, d)) for n, d in graph.graph_inputs)
    g += b"".join(_len_field(12, _encode_value_info(n, d)) for n, d in graph.graph_outputs)
    out = _int_field(1, ir_version) + _str_field(2, producer)
    out += _len_field(7, g)
    out += _len_field(8, _str_field(1, "") + _int_field(2, graph.opset or 11))
    return out


# --------------------------------------------------------------------------
# attribute access


def attr_int(node: RawNode, key: str, default: int) -> int:
    if key not in node.attributes:
        return default
    value = node.attributes[key]
    if not isinstance(value, int):
        raise AttrKindMismatch(f"{node.label}: attribute {key!r} is {value!r}, expected an int")
    return value


def attr_ints(node: RawNode, key: str, default: tuple | None) -> tuple | None:
    if key not in node.attributes:
        return default
    value = node.attributes[key]
    if not isinstance(value, tuple) or not all(isinstance(v, int) for v in value):
        raise AttrKindMismatch(f"{node.label}: attribute {key!r} is {value!r}, expected ints")
    return value


def attr_float(node: RawNode, key: str, default: float) -> float:
    if key not in node.attributes:
        return default
    value = node.attributes[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise AttrKindMismatch(f"{node.label}: attribute {key!r} is {value!r}, expected a float")
    return float(value)


def attr_str(node: RawNode, key: str, default: str) -> str:
    if key not in node.attributes:
        return default
    value = node.attributes[key]
    if not isinstance(value, str):
        raise AttrKindMismatch(f"{node.label}: attribute {key!r} is {value!r}, expected a string")
    return value
