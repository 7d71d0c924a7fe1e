import dataclasses
import struct

import numpy as np
import pytest

from cnnfit.cost import HardwareOption
from cnnfit.emit import HEADER, MANIFEST, DesignBundle, emit, fingerprint, load, make_bundle, render_manifest
from cnnfit.errors import BundleError, CorruptBlob, SinkFailure, VersionMismatch
from cnnfit.ir import fuse_stages, lower
from cnnfit.quant import QuantSpec, QuantTable
from cnnfit.zoo import ChainBuilder, alexnet


def small_bundle(seed=0, option=HardwareOption(2, 4), bias_bits=8):
    b = ChainBuilder((3, 12, 12)).conv(8, 3, p=1).maxpool(2).conv(16, 3, p=1).maxpool(2).flatten().gemm(10)
    stages = fuse_stages(lower(b.graph(seed=seed)))
    quant = QuantTable(QuantSpec.uniform(5, bias_bits), {1: QuantSpec(6, 5, 5, 4, bias_bits=bias_bits)})
    return make_bundle(b.onnx_bytes(seed=seed), stages, option, quant)


def test_round_trip(tmp_path):
    bundle = small_bundle()
    emit(bundle, tmp_path / "d")
    assert load(tmp_path / "d") == bundle
    assert load(tmp_path / "d" / MANIFEST) == bundle


def test_round_trip_32_bit_bias(tmp_path):
    bundle = small_bundle(bias_bits=32)
    emit(bundle, tmp_path)
    back = load(tmp_path)
    assert back == bundle
    assert back.stages[0].conv.biases.bits == 32


def test_manifest_is_deterministic():
    a, _ = render_manifest(small_bundle())
    b, _ = render_manifest(small_bundle())
    assert a == b
    assert "option ni=2 nl=4" in a
    assert sum(line.startswith("stage ") for line in a.splitlines()) == 3
    assert a.endswith("end\n")


def test_alexnet_manifest():
    stages = fuse_stages(lower(alexnet(67).graph(seed=0)))
    bundle = make_bundle(b"model", stages, HardwareOption(16, 32), QuantTable())
    text, blobs = render_manifest(bundle)
    assert "option ni=16 nl=32" in text
    assert sum(line.startswith("stage ") for line in text.splitlines()) == 8
    assert len(blobs) == 16


def test_fingerprint():
    assert fingerprint(b"") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert small_bundle(0).fingerprint != small_bundle(1).fingerprint


def test_truncated_blob(tmp_path):
    emit(small_bundle(), tmp_path)
    blob = tmp_path / "s0_l0_w.bin"
    blob.write_bytes(blob.read_bytes()[:-1])
    with pytest.raises(CorruptBlob, match="s0_l0_w.bin"):
        load(tmp_path)


def test_bad_magic(tmp_path):
    emit(small_bundle(), tmp_path)
    blob = tmp_path / "s0_l0_b.bin"
    blob.write_bytes(b"XXXX" + blob.read_bytes()[4:])
    with pytest.raises(CorruptBlob):
        load(tmp_path)


def test_header_disagrees_with_manifest(tmp_path):
    emit(small_bundle(), tmp_path)
    blob = tmp_path / "s0_l0_w.bin"
    raw = bytearray(blob.read_bytes())
    fields = list(HEADER.unpack_from(raw))
    fields[8] += 1  # fractional bits
    raw[: HEADER.size] = HEADER.pack(*fields)
    blob.write_bytes(bytes(raw))
    with pytest.raises(CorruptBlob):
        load(tmp_path)


def test_future_manifest_version(tmp_path):
    emit(small_bundle(), tmp_path)
    path = tmp_path / MANIFEST
    path.write_text(path.read_text().replace("cnnfit-design 1", "cnnfit-design 2", 1))
    with pytest.raises(VersionMismatch):
        load(tmp_path)


def test_future_blob_version(tmp_path):
    emit(small_bundle(), tmp_path)
    blob = tmp_path / "s1_l2_w.bin"
    raw = bytearray(blob.read_bytes())
    struct.pack_into("<I", raw, 4, 9)
    blob.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatch):
        load(tmp_path)


def test_missing_blob(tmp_path):
    emit(small_bundle(), tmp_path)
    (tmp_path / "s2_l4_b.bin").unlink()
    with pytest.raises(BundleError):
        load(tmp_path)


@pytest.mark.parametrize(
    "edit",
    [
        lambda t: t.replace("end\n", ""),
        lambda t: t.replace("option ni=2 nl=4", "option ni=two nl=4"),
        lambda t: t.replace("passes=", "passes=x", 1),
        lambda t: t + "bogus line\n",
        lambda t: "",
    ],
)
def test_malformed_manifest(tmp_path, edit):
    emit(small_bundle(), tmp_path)
    path = tmp_path / MANIFEST
    path.write_text(edit(path.read_text()))
    with pytest.raises(BundleError):
        load(tmp_path)


def test_schedule_summary_cross_checked(tmp_path):
    emit(small_bundle(), tmp_path)
    path = tmp_path / MANIFEST
    path.write_text(path.read_text().replace("option ni=2 nl=4", "option ni=1 nl=4"))
    with pytest.raises(BundleError):
        load(tmp_path)


def test_empty_bundle_rejected(tmp_path):
    bundle = DesignBundle("0" * 64, HardwareOption(1, 1), [], QuantTable())
    with pytest.raises(BundleError):
        emit(bundle, tmp_path)


def test_unquantized_weights_rejected():
    b = ChainBuilder((3, 8, 8)).conv(4, 3)
    bundle = DesignBundle("0" * 64, HardwareOption(1, 1), b.stages(), QuantTable())
    with pytest.raises(BundleError, match="quantized"):
        bundle.validate()


def test_foreign_schedule_rejected():
    bundle = small_bundle()
    other = small_bundle(option=HardwareOption(1, 1))
    bad = dataclasses.replace(bundle, schedules=other.schedules)
    with pytest.raises(BundleError):
        render_manifest(bad)


def test_sink_failure(tmp_path):
    target = tmp_path / "file"
    target.write_text("occupied")
    with pytest.raises(SinkFailure):
        emit(small_bundle(), target)


def test_blob_payload_is_little_endian_int8(tmp_path):
    bundle = small_bundle()
    emit(bundle, tmp_path)
    raw = (tmp_path / "s0_l0_w.bin").read_bytes()
    magic, version, stage, *dims, m, n = HEADER.unpack_from(raw)
    assert magic == b"CNW1" and version == 1 and stage == 0
    assert dims == [8, 3, 3, 3] and m == 5 and n == 8 * 27
    w = bundle.stages[0].conv.weights.values
    np.testing.assert_array_equal(np.frombuffer(raw[HEADER.size:], "<i1").reshape(w.shape), w)
