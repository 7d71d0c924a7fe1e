"""Typed layer list built from a decoded ONNX graph.

The accelerator only has convolution, max-pooling and fully-connected
kernels, so lowering collapses the ONNX graph into a linear chain of those
three layer kinds.  Relu and Softmax become flags on the layer they follow;
Flatten/Reshape between the convolutional and the dense part disappear.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np

from .errors import (
    DanglingInput,
    DegenerateShape,
    ShapeMismatch,
    UnsupportedOp,
)
from .onnx_wire import RawGraph, RawNode, RawTensor, attr_float, attr_int, attr_ints, attr_str


@dataclass(frozen=True)
class TensorShape:
    c: int
    h: int = 1
    w: int = 1

    def __post_init__(self):
        if min(self.c, self.h, self.w) < 1:
            raise DegenerateShape(f"shape {self} has a dimension below 1")

    @property
    def size(self) -> int:
        return self.c * self.h * self.w

    def __str__(self) -> str:
        return f"{self.c}x{self.h}x{self.w}"


@dataclass(frozen=True)
class ConvAttrs:
    ks: tuple[int, int]
    st: tuple[int, int] = (1, 1)
    p: tuple[int, int] = (0, 0)
    d: tuple[int, int] = (1, 1)
    group: int = 1

    def __post_init__(self):
        if min(self.ks) < 1 or min(self.st) < 1:
            raise DegenerateShape(f"kernel {self.ks} / stride {self.st} must be >= 1")
        if min(self.p) < 0 or min(self.d) < 1 or self.group < 1:
            raise DegenerateShape(f"invalid padding {self.p}, dilation {self.d} or group {self.group}")

    def __str__(self) -> str:
        return (
            f"ks={self.ks[0]}x{self.ks[1]} st={self.st[0]}x{self.st[1]} "
            f"p={self.p[0]}x{self.p[1]} d={self.d[0]}x{self.d[1]} group={self.group}"
        )


class LayerKind(str, Enum):
    CONV = "Conv"
    MAXPOOL = "MaxPool"
    GEMM = "Gemm"


class BufferKind(str, Enum):
    CONV = "ConvBuffer"
    FC = "FcBuffer"


# weights may still be float RawTensors or already quantized (see quant.py)
Tensor = Union[RawTensor, "QuantizedTensor"]  # noqa: F821


@dataclass
class LayerDescriptor:
    index: int
    kind: LayerKind
    in_shape: TensorShape
    out_shape: TensorShape
    attrs: Optional[ConvAttrs] = None
    weights: Optional[Tensor] = None
    biases: Optional[Tensor] = None
    has_relu: bool = False
    has_softmax: bool = False
    name: str = ""

    @property
    def accumulation_length(self) -> int:
        """Number of products summed into one output element."""
        if self.kind is LayerKind.CONV:
            return (self.in_shape.c // self.attrs.group) * self.attrs.ks[0] * self.attrs.ks[1]
        if self.kind is LayerKind.GEMM:
            return self.in_shape.size
        return 0

    @property
    def mac_count(self) -> int:
        o = self.out_shape
        return o.c * o.h * o.w * self.accumulation_length

    def render(self) -> str:
        parts = [f"{self.index:3d}", f"{self.kind.value:<7}"]
        if self.attrs is not None:
            parts.append(str(self.attrs))
        parts.append(f"in={self.in_shape} out={self.out_shape}")
        flags = [f for f, on in (("relu", self.has_relu), ("softmax", self.has_softmax)) if on]
        parts.append("flags=" + (",".join(flags) if flags else "-"))
        return " ".join(parts)


@dataclass
class PipelineStage:
    conv: Optional[LayerDescriptor] = None
    pool: Optional[LayerDescriptor] = None
    buffer_kind: BufferKind = BufferKind.CONV
    index: int = 0

    def __post_init__(self):
        if self.conv is None and self.pool is None:
            raise ValueError("a pipeline stage needs a conv/FC or a pool member")

    @property
    def layers(self) -> list[LayerDescriptor]:
        return [x for x in (self.conv, self.pool) if x is not None]

    @property
    def in_shape(self) -> TensorShape:
        return self.layers[0].in_shape

    @property
    def out_shape(self) -> TensorShape:
        return self.layers[-1].out_shape

    @property
    def is_fc(self) -> bool:
        return self.conv is not None and self.conv.kind is LayerKind.GEMM

    @property
    def buffer_bytes(self) -> int:
        # int8 feature maps: the stage buffer holds its whole input or output map
        return max(self.in_shape.size, self.out_shape.size)


# --------------------------------------------------------------------------
# shape inference


def infer_conv_shape(
    shape: TensorShape, attrs: ConvAttrs, out_channels: int | None = None
) -> TensorShape:
    """Output geometry of a convolution or max-pool window.

    ``out_channels=None`` means a pooling layer, where the channel count
    passes through unchanged.
    """
    dims = []
    for i, size in enumerate((shape.h, shape.w)):
        span = attrs.d[i] * (attrs.ks[i] - 1) + 1
        dims.append((size + 2 * attrs.p[i] - span) // attrs.st[i] + 1)
    c = shape.c if out_channels is None else out_channels
    if min(dims) < 1 or c < 1:
        raise DegenerateShape(f"input {shape} with {attrs} gives an empty output")
    return TensorShape(c, dims[0], dims[1])


# --------------------------------------------------------------------------
# lowering


def _pair(node: RawNode, key: str, default: tuple[int, int]) -> tuple[int, int]:
    v = attr_ints(node, key, None)
    if v is None:
        return default
    if len(v) != 2:
        raise UnsupportedOp(f"{node.label}: only 2-D {key} supported, got {v}")
    return int(v[0]), int(v[1])


def _window_attrs(node: RawNode, ks: tuple[int, int] | None) -> ConvAttrs:
    if attr_str(node, "auto_pad", "NOTSET") not in ("NOTSET", "VALID"):
        raise UnsupportedOp(f"{node.label}: auto_pad={node.attributes['auto_pad']} not supported")
    if ks is None:
        ks = _pair(node, "kernel_shape", None)
        if ks is None:
            raise UnsupportedOp(f"{node.label}: missing kernel_shape")
    pads = attr_ints(node, "pads", (0, 0, 0, 0))
    if len(pads) != 4:
        raise UnsupportedOp(f"{node.label}: expected 4 pads, got {pads}")
    if pads[0] != pads[2] or pads[1] != pads[3]:
        raise UnsupportedOp(f"{node.label}: asymmetric pads {pads} not supported")
    return ConvAttrs(
        ks=ks,
        st=_pair(node, "strides", (1, 1)),
        p=(int(pads[0]), int(pads[1])),
        d=_pair(node, "dilations", (1, 1)),
        group=attr_int(node, "group", 1),
    )


@dataclass
class _Cursor:
    """Head of the linear chain while walking the graph."""

    tensor: str
    shape: TensorShape
    flat: bool = False
    last: Optional[LayerDescriptor] = None


def _input_shape(graph: RawGraph) -> tuple[str, TensorShape]:
    data = [(n, d) for n, d in graph.graph_inputs if n not in graph.initializers]
    if len(data) != 1:
        raise UnsupportedOp(f"expected exactly one data input, found {[n for n, _ in data]}")
    name, dims = data[0]
    dims = list(dims)
    if len(dims) == 4:
        if dims[0] not in (1, None):
            raise UnsupportedOp(f"input {name!r}: batch size {dims[0]} (only 1 supported)")
        dims = dims[1:]
    if len(dims) != 3 or any(d is None for d in dims):
        raise UnsupportedOp(f"input {name!r}: need static (C,H,W) dims, got {tuple(dims)}")
    return name, TensorShape(*dims)


def _initializer(graph: RawGraph, node: RawNode, pos: int, required: bool = True):
    if len(node.inputs) <= pos or not node.inputs[pos]:
        if required:
            raise UnsupportedOp(f"{node.label}: missing input #{pos}")
        return None
    name = node.inputs[pos]
    if name not in graph.initializers:
        raise UnsupportedOp(f"{node.label}: input {name!r} must be a constant initializer")
    return graph.initializers[name]


def _check_order(graph: RawGraph, data_input: str) -> None:
    produced_at = {}
    for i, node in enumerate(graph.nodes):
        for out in node.outputs:
            produced_at[out] = i
    available = {data_input, *graph.initializers}
    for i, node in enumerate(graph.nodes):
        for name in node.inputs:
            if not name or name in available:
                continue
            if name in produced_at:
                raise DanglingInput(
                    f"{node.label}: consumes {name!r} before it is produced (graph not topologically sorted)"
                )
            raise DanglingInput(f"{node.label}: consumes {name!r}, which no node produces")
        available.update(node.outputs)


def lower(graph: RawGraph) -> list[LayerDescriptor]:
    """Turn a decoded graph into an ordered list of Conv/MaxPool/Gemm layers.

    Diagnostics (transposed Gemm weights, opset ambiguities) are appended to
    ``graph.diagnostics``.
    """
    data_input, shape = _input_shape(graph)
    _check_order(graph, data_input)
    cur = _Cursor(data_input, shape)
    layers: list[LayerDescriptor] = []

    for node in graph.nodes:
        op = node.op_type
        if not node.inputs or node.inputs[0] != cur.tensor:
            if op in ("Conv", "MaxPool", "Gemm", "Relu", "Softmax", "Flatten", "Reshape"):
                raise UnsupportedOp(
                    f"{node.label}: reads {node.inputs[:1]}, but the chain head is {cur.tensor!r} "
                    "(branching graphs are not supported)"
                )
            raise UnsupportedOp(f"{node.label}: operator {op!r} is not supported")
        if not node.outputs or not node.outputs[0]:
            raise DanglingInput(f"{node.label}: node has no output tensor")

        if op == "Conv":
            if cur.flat:
                raise UnsupportedOp(f"{node.label}: convolution after flatten")
            w = _initializer(graph, node, 1)
            b = _initializer(graph, node, 2, required=False)
            if len(w.dims) != 4:
                raise UnsupportedOp(f"{node.label}: weight rank {len(w.dims)} (need 4)")
            attrs = _window_attrs(node, (w.dims[2], w.dims[3]))
            ks_attr = attr_ints(node, "kernel_shape", None)
            if ks_attr is not None and tuple(ks_attr) != attrs.ks:
                raise ShapeMismatch(f"{node.label}: kernel_shape {ks_attr} vs weight dims {w.dims}")
            if cur.shape.c % attrs.group or w.dims[0] % attrs.group:
                raise ShapeMismatch(f"{node.label}: channels not divisible by group {attrs.group}")
            if w.dims[1] * attrs.group != cur.shape.c:
                raise ShapeMismatch(
                    f"{node.label}: weight expects {w.dims[1] * attrs.group} input channels, got {cur.shape.c}"
                )
            if b is not None and b.dims != (w.dims[0],):
                raise ShapeMismatch(f"{node.label}: bias dims {b.dims} vs {w.dims[0]} outputs")
            out = infer_conv_shape(cur.shape, attrs, w.dims[0])
            layer = LayerDescriptor(len(layers), LayerKind.CONV, cur.shape, out, attrs, w, b, name=node.name)
        elif op == "MaxPool":
            if cur.flat:
                raise UnsupportedOp(f"{node.label}: pooling after flatten")
            if attr_int(node, "ceil_mode", 0):
                raise UnsupportedOp(f"{node.label}: ceil_mode=1 not supported")
            if len(node.outputs) > 1 and node.outputs[1]:
                raise UnsupportedOp(f"{node.label}: Indices output not supported")
            attrs = _window_attrs(node, None)
            if attrs.group != 1:
                raise UnsupportedOp(f"{node.label}: group on MaxPool")
            out = infer_conv_shape(cur.shape, attrs)
            layer = LayerDescriptor(len(layers), LayerKind.MAXPOOL, cur.shape, out, attrs, name=node.name)
        elif op == "Gemm":
            if attr_float(node, "alpha", 1.0) != 1.0 or attr_float(node, "beta", 1.0) != 1.0:
                raise UnsupportedOp(f"{node.label}: alpha/beta other than 1")
            if attr_int(node, "transA", 0):
                raise UnsupportedOp(f"{node.label}: transA=1 not supported")
            w = _initializer(graph, node, 1)
            b = _initializer(graph, node, 2, required=False)
            if len(w.dims) != 2:
                raise UnsupportedOp(f"{node.label}: weight rank {len(w.dims)} (need 2)")
            if not attr_int(node, "transB", 0):
                arr = np.ascontiguousarray(w.to_numpy().T)
                w = RawTensor.from_numpy(w.name, arr)
                graph.diagnostics.append(f"{node.label}: transB=0 weight transposed to (out, in) layout")
            n_out, n_in = w.dims
            if n_in != cur.shape.size:
                raise ShapeMismatch(f"{node.label}: weight inner dim {n_in} vs input length {cur.shape.size}")
            if b is not None and b.size != n_out:
                raise ShapeMismatch(f"{node.label}: bias has {b.size} entries for {n_out} outputs")
            if b is not None and b.dims != (n_out,):
                b = RawTensor(b.name, (n_out,), b.dtype, b.payload)
            layer = LayerDescriptor(
                len(layers), LayerKind.GEMM, cur.shape, TensorShape(n_out), None, w, b, name=node.name
            )
        elif op == "Relu":
            if cur.last is None:
                raise UnsupportedOp(f"{node.label}: Relu without a preceding layer")
            cur.last.has_relu = True
            cur.tensor = node.outputs[0]
            continue
        elif op == "Softmax":
            if cur.last is None or cur.last.kind is not LayerKind.GEMM:
                raise UnsupportedOp(f"{node.label}: Softmax must follow a Gemm")
            if "axis" not in node.attributes:
                graph.diagnostics.append(
                    f"{node.label}: Softmax axis default differs across opsets (1 before 13, -1 after); "
                    "identical for (1, N) logits"
                )
            elif attr_int(node, "axis", 1) not in (1, -1):
                raise UnsupportedOp(f"{node.label}: Softmax over axis {node.attributes['axis']}")
            cur.last.has_softmax = True
            cur.tensor = node.outputs[0]
            continue
        elif op in ("Flatten", "Reshape"):
            if op == "Flatten" and attr_int(node, "axis", 1) != 1:
                raise UnsupportedOp(f"{node.label}: Flatten axis must be 1")
            if op == "Reshape":
                target = _initializer(graph, node, 1)
                dims = [int(x) for x in target.to_numpy().ravel()]
                flat_ok = len(dims) == 2 and dims[0] in (1, 0, -1) and dims[1] in (-1, cur.shape.size)
                if not flat_ok or dims == [-1, -1]:
                    raise UnsupportedOp(f"{node.label}: reshape to {dims} is not a flatten")
            cur.tensor = node.outputs[0]
            cur.shape = TensorShape(cur.shape.size)
            cur.flat = True
            continue
        else:
            raise UnsupportedOp(f"{node.label}: operator {op!r} is not supported")

        layers.append(layer)
        cur = _Cursor(node.outputs[0], layer.out_shape, flat=layer.kind is LayerKind.GEMM, last=layer)

    if not layers:
        raise UnsupportedOp("graph has no Conv, MaxPool or Gemm node")
    return layers


def fuse_stages(layers: list[LayerDescriptor]) -> list[PipelineStage]:
    stages: list[PipelineStage] = []
    i = 0
    while i < len(layers):
        layer = layers[i]
        if layer.kind is LayerKind.GEMM:
            stages.append(PipelineStage(conv=layer, buffer_kind=BufferKind.FC))
            i += 1
        elif layer.kind is LayerKind.CONV:
            nxt = layers[i + 1] if i + 1 < len(layers) else None
            if nxt is not None and nxt.kind is LayerKind.MAXPOOL:
                stages.append(PipelineStage(conv=layer, pool=nxt))
                i += 2
            else:
                stages.append(PipelineStage(conv=layer))
                i += 1
        else:
            stages.append(PipelineStage(pool=layer))
            i += 1
    for k, stage in enumerate(stages):
        stage.index = k
    return stages


def expand_stages(stages: list[PipelineStage]) -> list[LayerDescriptor]:
    return [layer for stage in stages for layer in stage.layers]


def dump_ir(layers: list[LayerDescriptor]) -> str:
    return "\n".join(layer.render() for layer in layers) + "\n"
