import numpy as np
import pytest

from cnnfit.errors import (
    AttrKindMismatch,
    CnnfitError,
    MalformedWire,
    MissingGraph,
    UnsupportedDtype,
    UnsupportedFeature,
)
from cnnfit.onnx_wire import (
    RawGraph,
    RawNode,
    RawTensor,
    attr_float,
    attr_int,
    attr_ints,
    attr_str,
    decode_model,
    encode_model,
    load_model,
)
from cnnfit.zoo import ChainBuilder, alexnet

onnx = pytest.importorskip("onnx")
from onnx import TensorProto, helper, numpy_helper  # noqa: E402


def _stock_model(opset=11, weights_as_float_data=False):
    rng = np.random.default_rng(0)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    fc = rng.standard_normal((5, 4 * 3 * 3)).astype(np.float32)
    if weights_as_float_data:
        w_init = helper.make_tensor("w", TensorProto.FLOAT, w.shape, w.ravel().tolist())
    else:
        w_init = numpy_helper.from_array(w, "w")
    nodes = [
        helper.make_node("Conv", ["x", "w", "b"], ["c"], name="conv", kernel_shape=[3, 3], pads=[1, 1, 1, 1],
                         strides=[1, 1]),
        helper.make_node("Relu", ["c"], ["r"], name="relu"),
        helper.make_node("MaxPool", ["r"], ["p"], name="pool", kernel_shape=[2, 2], strides=[2, 2]),
        helper.make_node("Flatten", ["p"], ["f"], name="flat", axis=1),
        helper.make_node("Gemm", ["f", "fc", "fcb"], ["y"], name="fc", transB=1, alpha=1.0),
        helper.make_node("Softmax", ["y"], ["prob"], name="sm", axis=1),
    ]
    graph = helper.make_graph(
        nodes,
        "g",
        [helper.make_tensor_value_info("x", TensorProto.FLOAT, [1, 3, 6, 6])],
        [helper.make_tensor_value_info("prob", TensorProto.FLOAT, [1, 5])],
        initializer=[w_init, numpy_helper.from_array(b, "b"), numpy_helper.from_array(fc, "fc"),
                     numpy_helper.from_array(np.zeros(5, np.float32), "fcb")],
        doc_string="stock exporter output",
    )
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", opset)], producer_name="test")
    model.metadata_props.add(key="k", value="v")
    return model, (w, b, fc)


def test_decode_matches_stock_parser():
    model, (w, b, fc) = _stock_model()
    g = decode_model(model.SerializeToString())
    assert g.opset == 11
    assert [n.op_type for n in g.nodes] == [n.op_type for n in model.graph.node]
    assert [n.name for n in g.nodes] == [n.name for n in model.graph.node]
    for ours, ref in zip(g.nodes, model.graph.node):
        assert ours.inputs == tuple(ref.input)
        assert ours.outputs == tuple(ref.output)
        for a in ref.attribute:
            assert ours.attributes[a.name] == pytest.approx(
                tuple(helper.get_attribute_value(a)) if a.ints else helper.get_attribute_value(a)
            )
    np.testing.assert_array_equal(g.initializers["w"].to_numpy(), w)
    np.testing.assert_array_equal(g.initializers["b"].to_numpy(), b)
    np.testing.assert_array_equal(g.initializers["fc"].to_numpy(), fc)
    assert g.graph_inputs == [("x", (1, 3, 6, 6))]
    assert g.graph_outputs == [("prob", (1, 5))]


def test_float_data_field_is_accepted():
    model, (w, _, _) = _stock_model(weights_as_float_data=True)
    g = decode_model(model.SerializeToString())
    np.testing.assert_array_equal(g.initializers["w"].to_numpy(), w)


def test_encode_is_readable_by_stock_parser():
    data = alexnet(67).onnx_bytes(seed=0)
    model = onnx.load_from_string(data)
    onnx.checker.check_model(model)
    ours = decode_model(data)
    assert len(model.graph.node) == len(ours.nodes)
    for t in model.graph.initializer:
        np.testing.assert_array_equal(numpy_helper.to_array(t), ours.initializers[t.name].to_numpy())


def test_encode_decode_round_trip():
    g = ChainBuilder((3, 8, 8)).conv(4, 3, p=1).maxpool(2).flatten().gemm(3, softmax=True).graph(seed=2)
    assert decode_model(encode_model(g)) == g
    gi = ChainBuilder((3, 8, 8)).conv(4, 3, p=1).graph(seed=2, dtype="int8")
    assert decode_model(encode_model(gi)) == gi


def test_unknown_fields_are_skipped():
    model, _ = _stock_model()
    data = model.SerializeToString()
    # field 99 varint, field 100 fixed64, field 101 length-delimited, field 102 fixed32, group 103
    junk = bytes([0x98, 0x06, 0x2A]) + bytes([0xA1, 0x06]) + b"\x00" * 8
    junk += bytes([0xAA, 0x06, 0x03]) + b"abc" + bytes([0xB5, 0x06]) + b"\x00" * 4
    junk += bytes([0xBB, 0x06, 0x08, 0x01, 0xBC, 0x06])
    assert decode_model(junk + data + junk) == decode_model(data)


def test_split_graph_chunks_merge():
    model, _ = _stock_model()
    whole = decode_model(model.SerializeToString())
    m2 = onnx.ModelProto()
    m2.CopyFrom(model)
    # move the initializers into a second serialized GraphProto occurrence
    extra = onnx.GraphProto()
    extra.initializer.extend(m2.graph.initializer)
    del m2.graph.initializer[:]
    data = m2.SerializeToString() + bytes([0x3A]) + _varint(len(extra.SerializeToString())) + extra.SerializeToString()
    assert decode_model(data) == whole


def _varint(n):
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        out.append(b | (0x80 if n else 0))
        if not n:
            return bytes(out)


def test_opset_outside_range_is_diagnosed():
    model, _ = _stock_model(opset=17)
    g = decode_model(model.SerializeToString())
    assert g.opset == 17
    assert any("opset 17" in d for d in g.diagnostics)


def test_missing_graph():
    with pytest.raises(MissingGraph):
        decode_model(b"")
    with pytest.raises(MissingGraph):
        decode_model(helper.make_opsetid("", 11).SerializeToString()[:0] + bytes([0x08, 0x07]))


def test_truncation_is_malformed():
    model, _ = _stock_model()
    data = model.SerializeToString()
    with pytest.raises(MalformedWire):
        decode_model(data[:-3])


def test_wrong_wire_type_for_known_field():
    # ModelProto.graph (7) sent as a varint
    with pytest.raises(MalformedWire):
        decode_model(bytes([0x38, 0x01]))


def test_unsupported_dtype():
    t = numpy_helper.from_array(np.zeros(3, np.float16), "h")
    graph = helper.make_graph([], "g", [], [], initializer=[t])
    with pytest.raises(UnsupportedDtype):
        decode_model(helper.make_model(graph).SerializeToString())


def test_external_data_is_rejected():
    t = numpy_helper.from_array(np.zeros(3, np.float32), "e")
    t.ClearField("raw_data")
    t.data_location = TensorProto.EXTERNAL
    entry = t.external_data.add()
    entry.key, entry.value = "location", "weights.bin"
    graph = helper.make_graph([], "g", [], [], initializer=[t])
    with pytest.raises(UnsupportedFeature):
        decode_model(helper.make_model(graph).SerializeToString())


def test_payload_size_checked():
    with pytest.raises(MalformedWire):
        RawTensor("t", (2, 2), "float32", b"\x00" * 15)


def test_empty_op_type_rejected():
    with pytest.raises(MalformedWire):
        RawNode("")


def test_attribute_accessors():
    node = RawNode("Conv", "c", attributes={"group": 2, "pads": (1, 1, 1, 1), "alpha": 0.5, "auto_pad": "VALID"})
    assert attr_int(node, "group", 1) == 2
    assert attr_int(node, "missing", 7) == 7
    assert attr_ints(node, "pads", None) == (1, 1, 1, 1)
    assert attr_float(node, "alpha", 1.0) == 0.5
    assert attr_str(node, "auto_pad", "NOTSET") == "VALID"
    with pytest.raises(AttrKindMismatch):
        attr_int(node, "pads", 0)
    with pytest.raises(AttrKindMismatch):
        attr_ints(node, "group", None)


def test_load_model_from_file(tmp_path):
    path = tmp_path / "m.onnx"
    path.write_bytes(alexnet(67).onnx_bytes())
    # 5 conv + 7 relu + 3 pool + flatten + 3 gemm + softmax
    assert len(load_model(path).nodes) == 20


def test_orphan_initializer_diagnostic():
    g = ChainBuilder((3, 4, 4)).conv(2, 1).graph()
    g.initializers["unused"] = RawTensor.from_numpy("unused", np.zeros(2, np.float32))
    out = decode_model(encode_model(g))
    assert any("unused" in d for d in out.diagnostics)


def test_mutation_fuzz_small():
    """Short version of the acceptance fuzz: every failure is a typed error."""
    data = bytearray(ChainBuilder((3, 8, 8)).conv(4, 3).maxpool(2).flatten().gemm(3).onnx_bytes())
    rng = np.random.default_rng(1)
    for _ in range(300):
        buf = bytearray(data)
        pos = int(rng.integers(len(buf)))
        buf[pos] = int(rng.integers(256))
        try:
            decode_model(bytes(buf))
        except CnnfitError:
            pass


def test_raw_graph_is_plain_data():
    g = RawGraph()
    assert g.nodes == [] and g.opset is None
