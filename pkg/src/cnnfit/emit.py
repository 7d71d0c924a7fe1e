"""Design artifact: a text manifest plus one binary blob per parameter tensor.

Manifest (``design.manifest``), one record per line, fields space separated::

    cnnfit-design <version>
    fingerprint <sha256 of the source model file>
    option ni=<n_i> nl=<n_l>
    quant-default <m_w> <m_b> <m_in> <m_out> bias_bits=<8|32>
    quant <layer> <m_w> <m_b> <m_in> <m_out>          (zero or more)
    stage <i> buffer=<ConvBuffer|FcBuffer> bytes=<n> passes=<n> slabs=<n> taps=<n>
    layer <stage> <role> <index> <kind> in=CxHxW out=CxHxW attrs=<...> relu=<0|1> softmax=<0|1> name=<quoted>
    blob <stage> <layer> <weights|bias> <file> dims=<d0,d1,..> m=<m> bits=<8|32>
    end

Blob header (little-endian, struct ``<4sII4IiQ``): magic, version, stage
index, four dims (unused trailing dims are 0), m, payload length in bytes.
Weights use magic ``CNW1``, biases ``CNB1``.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from urllib.parse import quote, unquote

import numpy as np

from .cost import HardwareOption
from .errors import BundleError, CorruptBlob, SinkFailure, VersionMismatch
from .ir import BufferKind, ConvAttrs, LayerDescriptor, LayerKind, PipelineStage, TensorShape
from .quant import QuantizedTensor, QuantSpec, QuantTable
from .sim import StageSchedule, build_schedule, quantize_stages

FORMAT_VERSION = 1
MANIFEST = "design.manifest"
HEADER = struct.Struct("<4sII4IiQ")
MAGIC = {"weights": b"CNW1", "bias": b"CNB1"}


def fingerprint(model_bytes: bytes) -> str:
    return hashlib.sha256(model_bytes).hexdigest()


@dataclass
class DesignBundle:
    fingerprint: str
    option: HardwareOption
    stages: list[PipelineStage]
    quant: QuantTable
    schedules: list[StageSchedule] = field(default_factory=list)

    def __post_init__(self):
        if not self.schedules:
            self.schedules = [build_schedule(s, self.option) for s in self.stages]

    @property
    def buffers(self) -> list[tuple[BufferKind, int]]:
        return [(s.buffer_kind, s.buffer_bytes) for s in self.stages]

    def validate(self) -> None:
        if not self.stages:
            raise BundleError("bundle has no stages")
        if len(self.schedules) != len(self.stages):
            raise BundleError("one schedule per stage is required")
        for stage, sched in zip(self.stages, self.schedules):
            if sched.option != self.option or sched.stage_index != stage.index:
                raise BundleError(f"stage {stage.index}: schedule does not belong to this bundle")
            # the largest slab any pass touches is one full input or output map
            if stage.buffer_bytes < max(stage.in_shape.size, stage.out_shape.size):
                raise BundleError(f"stage {stage.index}: buffer smaller than its feature maps")
            for layer in stage.layers:
                if layer.kind is not LayerKind.MAXPOOL and not isinstance(layer.weights, QuantizedTensor):
                    raise BundleError(f"layer {layer.index}: weights are not quantized")


def make_bundle(
    model_bytes: bytes, stages: Sequence[PipelineStage], option: HardwareOption, quant: QuantTable
) -> DesignBundle:
    return DesignBundle(fingerprint(model_bytes), option, quantize_stages(stages, quant), quant)


# --------------------------------------------------------------------------
# writing


def _shape(s: TensorShape) -> str:
    return f"{s.c}x{s.h}x{s.w}"


def _attrs(a: ConvAttrs | None) -> str:
    if a is None:
        return "-"
    return ",".join(str(v) for v in (*a.ks, *a.st, *a.p, *a.d, a.group))


def _blob_name(stage: int, layer: int, role: str) -> str:
    return f"s{stage}_l{layer}_{'w' if role == 'weights' else 'b'}.bin"


def _blob_bytes(t: QuantizedTensor, stage: int, role: str) -> bytes:
    if len(t.dims) > 4:
        raise BundleError(f"stage {stage}: {role} tensor has rank {len(t.dims)} > 4")
    dims = list(t.dims) + [0] * (4 - len(t.dims))
    payload = t.values.astype("<i1" if t.bits == 8 else "<i4").tobytes()
    return HEADER.pack(MAGIC[role], FORMAT_VERSION, stage, *dims, t.m, len(payload)) + payload


def render_manifest(bundle: DesignBundle) -> tuple[str, dict[str, bytes]]:
    """Manifest text and blob images; byte-identical for equal bundles."""
    bundle.validate()
    d = bundle.quant.default
    lines = [
        f"cnnfit-design {FORMAT_VERSION}",
        f"fingerprint {bundle.fingerprint}",
        f"option ni={bundle.option.n_i} nl={bundle.option.n_l}",
        f"quant-default {d.m_weights} {d.m_bias} {d.m_in} {d.m_out} bias_bits={d.bias_bits}",
    ]
    for idx in sorted(bundle.quant.layers):
        s = bundle.quant.layers[idx]
        lines.append(f"quant {idx} {s.m_weights} {s.m_bias} {s.m_in} {s.m_out}")
    blobs: dict[str, bytes] = {}
    for stage, sched in zip(bundle.stages, bundle.schedules):
        lines.append(
            f"stage {stage.index} buffer={stage.buffer_kind.value} bytes={stage.buffer_bytes} "
            f"passes={sched.passes} slabs={len(sched.channel_slabs)} taps={len(sched.taps)}"
        )
        for role in ("conv", "pool"):
            layer = getattr(stage, role)
            if layer is None:
                continue
            lines.append(
                f"layer {stage.index} {role} {layer.index} {layer.kind.value} "
                f"in={_shape(layer.in_shape)} out={_shape(layer.out_shape)} attrs={_attrs(layer.attrs)} "
                f"relu={int(layer.has_relu)} softmax={int(layer.has_softmax)} name={quote(layer.name, safe='')}"
            )
            for tag, t in (("weights", layer.weights), ("bias", layer.biases)):
                if t is None:
                    continue
                name = _blob_name(stage.index, layer.index, tag)
                blobs[name] = _blob_bytes(t, stage.index, tag)
                lines.append(
                    f"blob {stage.index} {layer.index} {tag} {name} "
                    f"dims={','.join(map(str, t.dims))} m={t.m} bits={t.bits}"
                )
    lines.append("end")
    return "\n".join(lines) + "\n", blobs


def emit(bundle: DesignBundle, out_dir) -> Path:
    text, blobs = render_manifest(bundle)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, data in blobs.items():
            (out / name).write_bytes(data)
        # manifest last, via rename, so a readable manifest implies complete blobs
        tmp = out / (MANIFEST + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, out / MANIFEST)
    except OSError as exc:
        raise SinkFailure(f"cannot write design to {out}: {exc}") from exc
    return out / MANIFEST


# --------------------------------------------------------------------------
# reading


def _kv(tokens: Sequence[str]) -> dict[str, str]:
    out = {}
    for tok in tokens:
        key, sep, val = tok.partition("=")
        if not sep:
            raise BundleError(f"expected key=value, got {tok!r}")
        out[key] = val
    return out


def _parse_shape(text: str) -> TensorShape:
    return TensorShape(*(int(v) for v in text.split("x")))


def _parse_attrs(text: str) -> ConvAttrs | None:
    if text == "-":
        return None
    v = [int(x) for x in text.split(",")]
    if len(v) != 9:
        raise BundleError(f"bad attrs field {text!r}")
    return ConvAttrs((v[0], v[1]), (v[2], v[3]), (v[4], v[5]), (v[6], v[7]), v[8])


def _read_blob(path: Path, stage: int, role: str, dims: tuple[int, ...], m: int, bits: int) -> QuantizedTensor:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CorruptBlob(f"{path.name}: {exc}") from exc
    if len(data) < HEADER.size:
        raise CorruptBlob(f"{path.name}: truncated header")
    magic, version, h_stage, d0, d1, d2, d3, h_m, length = HEADER.unpack_from(data)
    if magic != MAGIC[role]:
        raise CorruptBlob(f"{path.name}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path.name}: blob version {version}, supported {FORMAT_VERSION}")
    h_dims = tuple(d for d in (d0, d1, d2, d3) if d)
    if (h_stage, h_dims, h_m) != (stage, dims, m):
        raise CorruptBlob(f"{path.name}: header disagrees with the manifest")
    size = int(np.prod(dims)) * (1 if bits == 8 else 4)
    if length != size or len(data) - HEADER.size != length:
        raise CorruptBlob(f"{path.name}: payload is {len(data) - HEADER.size} bytes, expected {size}")
    values = np.frombuffer(data, dtype="<i1" if bits == 8 else "<i4", offset=HEADER.size)
    return QuantizedTensor(dims, values.reshape(dims), m, bits=bits)


def load(src) -> DesignBundle:
    root = Path(src)
    if root.is_dir():
        root = root / MANIFEST
    try:
        lines = root.read_text().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise BundleError(f"cannot read manifest {root}: {exc}") from exc
    base = root.parent
    try:
        return _parse(lines, base)
    except (ValueError, IndexError, KeyError) as exc:
        raise BundleError(f"{root}: malformed manifest ({exc})") from exc


def _parse(lines: list[str], base: Path) -> DesignBundle:
    if not lines or not lines[0].startswith("cnnfit-design "):
        raise BundleError("not a design manifest")
    version = int(lines[0].split()[1])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"manifest version {version}, supported {FORMAT_VERSION}")
    if lines[-1] != "end":
        raise BundleError("manifest is truncated (no end record)")
    fp = ""
    option = None
    quant = QuantTable()
    stages: dict[int, dict] = {}
    layers: dict[int, LayerDescriptor] = {}
    counts: dict[int, tuple[int, int, int]] = {}
    for line in lines[1:-1]:
        tok = line.split()
        rec = tok[0]
        if rec == "fingerprint":
            fp = tok[1]
        elif rec == "option":
            kv = _kv(tok[1:])
            option = HardwareOption(int(kv["ni"]), int(kv["nl"]))
        elif rec == "quant-default":
            mw, mb, mi, mo = (int(v) for v in tok[1:5])
            quant.default = QuantSpec(mw, mb, mi, mo, bias_bits=int(_kv(tok[5:])["bias_bits"]))
        elif rec == "quant":
            idx, mw, mb, mi, mo = (int(v) for v in tok[1:6])
            quant.layers[idx] = QuantSpec(mw, mb, mi, mo, bias_bits=quant.default.bias_bits)
        elif rec == "stage":
            kv = _kv(tok[2:])
            i = int(tok[1])
            stages[i] = {"buffer_kind": BufferKind(kv["buffer"]), "index": i}
            counts[i] = (int(kv["passes"]), int(kv["slabs"]), int(kv["taps"]))
            if int(kv["bytes"]) < 1:
                raise BundleError(f"stage {i}: bad buffer size")
        elif rec == "layer":
            s, role, idx, kind = int(tok[1]), tok[2], int(tok[3]), LayerKind(tok[4])
            kv = _kv(tok[5:])
            layer = LayerDescriptor(
                idx, kind, _parse_shape(kv["in"]), _parse_shape(kv["out"]), _parse_attrs(kv["attrs"]),
                has_relu=kv["relu"] == "1", has_softmax=kv["softmax"] == "1", name=unquote(kv["name"]),
            )
            if role not in ("conv", "pool"):
                raise BundleError(f"unknown layer role {role!r}")
            stages[s][role] = layer
            layers[idx] = layer
        elif rec == "blob":
            s, idx, role, name = int(tok[1]), int(tok[2]), tok[3], tok[4]
            kv = _kv(tok[5:])
            dims = tuple(int(v) for v in kv["dims"].split(","))
            t = _read_blob(base / name, s, role, dims, int(kv["m"]), int(kv["bits"]))
            if role == "weights":
                layers[idx].weights = t
            else:
                layers[idx].biases = t
        else:
            raise BundleError(f"unknown record {rec!r}")
    if option is None or not fp:
        raise BundleError("manifest lacks the option or fingerprint record")
    built = [PipelineStage(**stages[i]) for i in sorted(stages)]
    bundle = DesignBundle(fp, option, built, quant)
    for stage, sched in zip(built, bundle.schedules):
        if counts[stage.index] != (sched.passes, len(sched.channel_slabs), len(sched.taps)):
            raise BundleError(f"stage {stage.index}: schedule summary disagrees with the stage geometry")
    bundle.validate()
    return bundle
