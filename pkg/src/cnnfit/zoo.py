"""Programmatic CNN topologies, written out as ONNX graphs.

``ChainBuilder`` describes a linear Conv/MaxPool/Gemm network and can emit
either a full :class:`RawGraph` with random weights or just the layer
geometry (enough for the cost model and legality analysis).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ir import ConvAttrs, LayerDescriptor, LayerKind, TensorShape, fuse_stages, infer_conv_shape
from .onnx_wire import RawGraph, RawNode, RawTensor, encode_model


@dataclass
class ChainBuilder:
    input_shape: tuple[int, int, int]
    ops: list[tuple] = field(default_factory=list)

    def conv(self, out_c, k, s=1, p=0, group=1, d=1, relu=True):
        self.ops.append(("conv", out_c, k, s, p, group, d, relu))
        return self

    def maxpool(self, k, s=None, p=0, relu=False):
        self.ops.append(("pool", k, s or k, p, relu))
        return self

    def flatten(self):
        self.ops.append(("flatten",))
        return self

    def gemm(self, n_out, relu=False, softmax=False):
        self.ops.append(("gemm", n_out, relu, softmax))
        return self

    # ------------------------------------------------------------------

    def layers(self) -> list[LayerDescriptor]:
        """Layer geometry without weights."""
        shape = TensorShape(*self.input_shape)
        out: list[LayerDescriptor] = []
        for op in self.ops:
            kind = op[0]
            if kind == "conv":
                _, c, k, s, p, g, d, relu = op
                attrs = ConvAttrs((k, k), (s, s), (p, p), (d, d), g)
                nxt = infer_conv_shape(shape, attrs, c)
                out.append(LayerDescriptor(len(out), LayerKind.CONV, shape, nxt, attrs, has_relu=relu))
            elif kind == "pool":
                _, k, s, p, relu = op
                attrs = ConvAttrs((k, k), (s, s), (p, p))
                nxt = infer_conv_shape(shape, attrs)
                out.append(LayerDescriptor(len(out), LayerKind.MAXPOOL, shape, nxt, attrs, has_relu=relu))
            elif kind == "flatten":
                nxt = TensorShape(shape.size)
            else:
                _, n, relu, softmax = op
                shape = TensorShape(shape.size)
                nxt = TensorShape(n)
                out.append(
                    LayerDescriptor(len(out), LayerKind.GEMM, shape, nxt, has_relu=relu, has_softmax=softmax)
                )
            shape = nxt
        return out

    def stages(self):
        return fuse_stages(self.layers())

    def graph(self, seed: int = 0, dtype: str = "float32", opset: int = 11) -> RawGraph:
        """Full ONNX graph with random weights.

        float32 weights are drawn with fan-in scaling so activations stay
        O(1); int8 weights are uniform integers for pre-quantized models.
        """
        rng = np.random.default_rng(seed)
        g = RawGraph(name="chain", opset=opset)
        c, h, w = self.input_shape
        g.graph_inputs.append(("input", (1, c, h, w)))
        head = "input"
        shape = TensorShape(c, h, w)
        n = 0

        def tensor(name, dims, fan_in):
            if dtype == "int8":
                arr = rng.integers(-64, 64, size=dims, dtype=np.int8)
            else:
                arr = (rng.standard_normal(dims) * np.sqrt(2.0 / fan_in)).astype(np.float32)
            g.initializers[name] = RawTensor.from_numpy(name, arr)
            return name

        def node(op, inputs, attrs=None, name=None):
            nonlocal head, n
            n += 1
            out = f"t{n}"
            g.nodes.append(RawNode(op, name or f"{op.lower()}{n}", tuple(inputs), (out,), attrs or {}))
            head = out

        for op in self.ops:
            kind = op[0]
            if kind == "conv":
                _, oc, k, s, p, grp, d, relu = op
                fan_in = shape.c // grp * k * k
                wn = tensor(f"w{n + 1}", (oc, shape.c // grp, k, k), fan_in)
                bn = tensor(f"b{n + 1}", (oc,), fan_in * 16)
                attrs = {
                    "kernel_shape": (k, k), "strides": (s, s), "pads": (p, p, p, p),
                    "dilations": (d, d), "group": grp,
                }
                node("Conv", (head, wn, bn), attrs)
                shape = infer_conv_shape(shape, ConvAttrs((k, k), (s, s), (p, p), (d, d), grp), oc)
                if relu:
                    node("Relu", (head,))
            elif kind == "pool":
                _, k, s, p, relu = op
                node("MaxPool", (head,), {"kernel_shape": (k, k), "strides": (s, s), "pads": (p, p, p, p)})
                shape = infer_conv_shape(shape, ConvAttrs((k, k), (s, s), (p, p)))
                if relu:
                    node("Relu", (head,))
            elif kind == "flatten":
                node("Flatten", (head,), {"axis": 1})
                shape = TensorShape(shape.size)
            else:
                _, oc, relu, softmax = op
                fan_in = shape.size
                wn = tensor(f"w{n + 1}", (oc, fan_in), fan_in)
                bn = tensor(f"b{n + 1}", (oc,), fan_in * 16)
                node("Gemm", (head, wn, bn), {"transB": 1})
                shape = TensorShape(oc)
                if relu:
                    node("Relu", (head,))
                if softmax:
                    node("Softmax", (head,), {"axis": 1})
        g.graph_outputs.append((head, (1, shape.c)))
        return g

    def onnx_bytes(self, seed: int = 0, dtype: str = "float32") -> bytes:
        return encode_model(self.graph(seed, dtype))


def alexnet(input_size: int = 224) -> ChainBuilder:
    """Two-group AlexNet: grouped conv2/conv4/conv5, three max-pools, three FC layers."""
    return (
        ChainBuilder((3, input_size, input_size))
        .conv(96, 11, s=4, p=2).maxpool(3, 2)
        .conv(256, 5, p=2, group=2).maxpool(3, 2)
        .conv(384, 3, p=1)
        .conv(384, 3, p=1, group=2)
        .conv(256, 3, p=1, group=2).maxpool(3, 2)
        .flatten()
        .gemm(4096, relu=True)
        .gemm(4096, relu=True)
        .gemm(1000, softmax=True)
    )


def alexnet_stages():
    return alexnet().stages()
