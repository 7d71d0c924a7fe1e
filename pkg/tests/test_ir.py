from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnnfit.errors import DanglingInput, DegenerateShape, ShapeMismatch, UnsupportedOp
from cnnfit.ir import (
    BufferKind,
    ConvAttrs,
    LayerKind,
    TensorShape,
    dump_ir,
    expand_stages,
    fuse_stages,
    infer_conv_shape,
    lower,
)
from cnnfit.onnx_wire import RawGraph, RawNode, RawTensor
from cnnfit.zoo import ChainBuilder, alexnet
from oracles import placement_count

GOLDEN = Path(__file__).parent / "golden"


@settings(max_examples=300, deadline=None)
@given(
    size=st.integers(1, 40),
    k=st.integers(1, 7),
    s=st.integers(1, 4),
    p=st.integers(0, 3),
    d=st.integers(1, 3),
    c=st.integers(1, 8),
)
def test_shape_formula_matches_placement_count(size, k, s, p, d, c):
    attrs = ConvAttrs((k, 1), (s, 1), (p, 0), (d, 1))
    want = placement_count(size, k, s, p, d)
    if want < 1:
        with pytest.raises(DegenerateShape):
            infer_conv_shape(TensorShape(c, size, 1), attrs, 5)
    else:
        out = infer_conv_shape(TensorShape(c, size, 1), attrs, 5)
        assert (out.c, out.h, out.w) == (5, want, 1)


def test_pool_passes_channels_through():
    out = infer_conv_shape(TensorShape(7, 10, 10), ConvAttrs((2, 2), (2, 2)))
    assert out == TensorShape(7, 5, 5)


def test_alexnet_lowering_golden():
    layers = lower(alexnet().graph())
    assert dump_ir(layers) == (GOLDEN / "alexnet_ir.txt").read_text()
    kinds = [layer.kind for layer in layers]
    assert kinds.count(LayerKind.CONV) == 5
    assert kinds.count(LayerKind.MAXPOOL) == 3
    assert kinds.count(LayerKind.GEMM) == 3
    assert layers[-1].has_softmax and not layers[-1].has_relu
    assert layers[8].in_shape.size == 9216


def test_alexnet_fuses_to_eight_stages():
    stages = fuse_stages(lower(alexnet().graph()))
    assert len(stages) == 8
    assert [s.is_fc for s in stages] == [False] * 5 + [True] * 3
    assert [s.pool is not None for s in stages] == [True, True, False, False, True, False, False, False]
    assert [s.buffer_kind for s in stages] == [BufferKind.CONV] * 5 + [BufferKind.FC] * 3
    assert [s.index for s in stages] == list(range(8))
    assert len(expand_stages(stages)) == 11


def test_mac_count():
    layers = alexnet().layers()
    # conv1: 96*55*55 outputs, 3*11*11 products each
    assert layers[0].mac_count == 96 * 55 * 55 * 3 * 11 * 11
    # grouped conv2: each output sees 48 of the 96 channels
    assert layers[2].accumulation_length == 48 * 25
    assert layers[8].mac_count == 9216 * 4096
    assert layers[1].mac_count == 0


def _graph(nodes, inits, shape=(1, 3, 8, 8)):
    g = RawGraph(opset=11)
    g.graph_inputs.append(("x", shape))
    for name, arr in inits.items():
        g.initializers[name] = RawTensor.from_numpy(name, np.asarray(arr))
    g.nodes.extend(nodes)
    return g


def test_unsupported_op_is_named():
    g = _graph([RawNode("LSTM", "rnn", ("x",), ("y",))], {})
    with pytest.raises(UnsupportedOp, match="LSTM"):
        lower(g)


def test_branching_graph_rejected():
    w = np.zeros((4, 3, 1, 1), np.float32)
    g = _graph(
        [
            RawNode("Conv", "a", ("x", "w"), ("y",)),
            RawNode("Conv", "b", ("x", "w"), ("z",)),
        ],
        {"w": w},
    )
    with pytest.raises(UnsupportedOp, match="branching"):
        lower(g)


def test_dangling_input():
    g = _graph([RawNode("Relu", "r", ("ghost",), ("y",))], {})
    with pytest.raises(DanglingInput, match="ghost"):
        lower(g)


def test_unsorted_graph_is_dangling():
    w = np.zeros((4, 3, 1, 1), np.float32)
    g = _graph(
        [RawNode("Relu", "r", ("y",), ("z",)), RawNode("Conv", "c", ("x", "w"), ("y",))],
        {"w": w},
    )
    with pytest.raises(DanglingInput, match="topologically"):
        lower(g)


def test_conv_channel_mismatch():
    g = _graph([RawNode("Conv", "c", ("x", "w"), ("y",))], {"w": np.zeros((4, 2, 3, 3), np.float32)})
    with pytest.raises(ShapeMismatch):
        lower(g)


def test_gemm_inner_dim_mismatch():
    g = _graph(
        [RawNode("Flatten", "f", ("x",), ("f",), {"axis": 1}),
         RawNode("Gemm", "fc", ("f", "w"), ("y",), {"transB": 1})],
        {"w": np.zeros((10, 100), np.float32)},
    )
    with pytest.raises(ShapeMismatch, match="fc"):
        lower(g)


def test_gemm_without_transb_is_transposed():
    w = np.arange(192 * 2, dtype=np.float32).reshape(192, 2)
    g = _graph(
        [RawNode("Flatten", "f", ("x",), ("f",), {"axis": 1}), RawNode("Gemm", "fc", ("f", "w"), ("y",))],
        {"w": w},
    )
    (layer,) = lower(g)
    np.testing.assert_array_equal(layer.weights.to_numpy(), w.T)
    assert any("transB=0" in d for d in g.diagnostics)


def test_reshape_as_flatten():
    g = _graph(
        [RawNode("Reshape", "r", ("x", "s"), ("f",)),
         RawNode("Gemm", "fc", ("f", "w"), ("y",), {"transB": 1})],
        {"s": np.array([1, -1], np.int64), "w": np.zeros((4, 192), np.float32)},
    )
    (layer,) = lower(g)
    assert layer.in_shape == TensorShape(192)


def test_reshape_to_image_rejected():
    g = _graph([RawNode("Reshape", "r", ("x", "s"), ("f",))], {"s": np.array([1, 3, 64], np.int64)})
    with pytest.raises(UnsupportedOp):
        lower(g)


def test_softmax_without_axis_is_diagnosed():
    g = _graph(
        [RawNode("Flatten", "f", ("x",), ("f",), {"axis": 1}),
         RawNode("Gemm", "fc", ("f", "w"), ("y",), {"transB": 1}),
         RawNode("Softmax", "sm", ("y",), ("p",))],
        {"w": np.zeros((4, 192), np.float32)},
    )
    (layer,) = lower(g)
    assert layer.has_softmax
    assert any("Softmax axis" in d for d in g.diagnostics)


@pytest.mark.parametrize(
    "attrs",
    [
        {"auto_pad": "SAME_UPPER"},
        {"pads": (1, 0, 0, 1)},
        {"ceil_mode": 1},
    ],
)
def test_unsupported_pool_attributes(attrs):
    g = _graph([RawNode("MaxPool", "mp", ("x",), ("y",), {"kernel_shape": (2, 2), **attrs})], {})
    with pytest.raises(UnsupportedOp):
        lower(g)


def test_degenerate_shape():
    g = _graph([RawNode("MaxPool", "mp", ("x",), ("y",), {"kernel_shape": (9, 9)})], {})
    with pytest.raises(DegenerateShape):
        lower(g)


def test_batch_size_must_be_one():
    g = _graph([RawNode("Relu", "r", ("x",), ("y",))], {}, shape=(4, 3, 8, 8))
    with pytest.raises(UnsupportedOp, match="batch"):
        lower(g)


def test_symbolic_batch_accepted():
    g = ChainBuilder((3, 8, 8)).conv(4, 3).graph()
    g.graph_inputs[0] = ("input", (None, 3, 8, 8))
    assert len(lower(g)) == 1


def test_conv_without_following_pool_is_own_stage():
    stages = ChainBuilder((3, 8, 8)).maxpool(2).conv(4, 1).conv(4, 1).maxpool(2).stages()
    assert [(s.conv is not None, s.pool is not None) for s in stages] == [
        (False, True), (True, False), (True, True)
    ]


def test_stage_buffer_bytes():
    (stage,) = ChainBuilder((3, 8, 8)).conv(16, 3, p=1).maxpool(2).stages()
    # conv output reaches the pool through a pipe; only the stage input and output are buffered
    assert stage.buffer_bytes == max(3 * 8 * 8, 16 * 4 * 4)


def test_node_without_output_is_typed_error():
    g = _graph([RawNode("Relu", "r", ("x",), ())], {})
    with pytest.raises(DanglingInput, match="no output"):
        lower(g)
