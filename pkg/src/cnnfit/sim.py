"""Functional emulation of the pipelined conv/pool kernels in fixed point.

Each stage is executed the way the memory-read kernel feeds it: output
channels are processed ``n_l`` lanes at a time (one *pass* per lane group),
and every lane consumes input-channel vectors of ``n_i`` elements per
kernel tap.  Integer products are accumulated in float64, which is exact for
integer values below 2**53 (far above any int8 x int8 dot product here);
the result is then clamped to the 32-bit accumulator range, shifted back to
8 bits with round-half-away-from-zero, and saturated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .cost import HardwareOption
from .errors import ConfigError, InputShapeError, ScheduleGap
from .ir import ConvAttrs, LayerDescriptor, LayerKind, PipelineStage, expand_stages
from .quant import (
    QuantizedTensor,
    QuantSpec,
    QuantTable,
    as_quantized,
    quantize_array,
    rounding_shift,
    saturate,
)


@dataclass(frozen=True)
class StageSchedule:
    """Fetch/compute plan of one stage.

    ``lane_passes`` are output-channel ranges handled per pass (also the
    write plan: each pass writes its lanes' channels); ``channel_slabs`` are
    the input-channel vectors fetched per kernel tap.  Ranges are relative to
    one convolution group.
    """

    stage_index: int
    option: HardwareOption
    groups: int
    in_channels: int
    out_channels: int
    lane_passes: tuple[tuple[int, int], ...]
    channel_slabs: tuple[tuple[int, int], ...]
    taps: tuple[tuple[int, int], ...]

    @property
    def passes(self) -> int:
        return self.groups * len(self.lane_passes)


def _ranges(total: int, step: int) -> tuple[tuple[int, int], ...]:
    return tuple((lo, min(lo + step, total)) for lo in range(0, total, step))


def _geometry(stage: PipelineStage) -> tuple[int, int, int, tuple[int, int]]:
    """(groups, in channels per group, out channels per group, kernel size)."""
    layer = stage.conv
    if layer is None:
        c = stage.pool.in_shape.c
        return 1, c, c, (0, 0)
    if layer.kind is LayerKind.GEMM:
        return 1, layer.in_shape.size, layer.out_shape.c, (1, 1)
    g = layer.attrs.group
    return g, layer.in_shape.c // g, layer.out_shape.c // g, layer.attrs.ks


def build_schedule(stage: PipelineStage, opt: HardwareOption) -> StageSchedule:
    groups, cin, cout, ks = _geometry(stage)
    pool_only = stage.conv is None
    return StageSchedule(
        stage_index=stage.index,
        option=opt,
        groups=groups,
        in_channels=cin,
        out_channels=cout,
        lane_passes=_ranges(cout, opt.n_l),
        channel_slabs=() if pool_only else _ranges(cin, opt.n_i),
        taps=tuple((r, c) for r in range(ks[0]) for c in range(ks[1])),
    )


def _cover(ranges, total: int, what: str, stage: int) -> None:
    seen = np.zeros(total, dtype=np.int64)
    for lo, hi in ranges:
        if not 0 <= lo < hi <= total:
            raise ScheduleGap(f"stage {stage}: {what} range [{lo}, {hi}) outside [0, {total})")
        seen[lo:hi] += 1
    if np.any(seen == 0):
        raise ScheduleGap(f"stage {stage}: {what} {np.flatnonzero(seen == 0)[:8].tolist()} never fetched")
    if np.any(seen > 1):
        raise ScheduleGap(f"stage {stage}: {what} {np.flatnonzero(seen > 1)[:8].tolist()} fetched twice")


def check_schedule(sched: StageSchedule, stage: PipelineStage) -> None:
    groups, cin, cout, ks = _geometry(stage)
    if (sched.groups, sched.in_channels, sched.out_channels) != (groups, cin, cout):
        raise ScheduleGap(f"stage {sched.stage_index}: schedule geometry does not match the stage")
    _cover(sched.lane_passes, cout, "output channel", sched.stage_index)
    for lo, hi in sched.lane_passes:
        if hi - lo > sched.option.n_l:
            raise ScheduleGap(f"stage {sched.stage_index}: pass [{lo}, {hi}) wider than {sched.option.n_l} lanes")
    if stage.conv is not None:
        _cover(sched.channel_slabs, cin, "input channel", sched.stage_index)
        for lo, hi in sched.channel_slabs:
            if hi - lo > sched.option.n_i:
                raise ScheduleGap(f"stage {sched.stage_index}: slab [{lo}, {hi}) wider than {sched.option.n_i}")
        want = {(r, c) for r in range(ks[0]) for c in range(ks[1])}
        if len(sched.taps) != len(want) or set(sched.taps) != want:
            raise ScheduleGap(f"stage {sched.stage_index}: kernel taps not covered exactly once")


@dataclass
class StageReport:
    stage: int
    kind: str
    mac_count: int = 0
    passes: int = 0
    saturation_events: int = 0

    def render(self) -> str:
        return f"{self.stage} {self.kind} macs={self.mac_count} passes={self.passes} saturations={self.saturation_events}"


# --------------------------------------------------------------------------
# kernels


def _windows(x: np.ndarray, attrs, fill) -> tuple[np.ndarray, int, int]:
    """Padded input plus the strided view origin for each kernel tap."""
    ph, pw = attrs.p
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)), constant_values=fill)
    (kh, kw), (sh, sw), (dh, dw) = attrs.ks, attrs.st, attrs.d
    ho = (xp.shape[1] - dh * (kh - 1) - 1) // sh + 1
    wo = (xp.shape[2] - dw * (kw - 1) - 1) // sw + 1
    return xp, ho, wo


def _tap(xp, attrs, r, c, ho, wo):
    (sh, sw), (dh, dw) = attrs.st, attrs.d
    return xp[:, r * dh: r * dh + sh * (ho - 1) + 1: sh, c * dw: c * dw + sw * (wo - 1) + 1: sw]


def _conv(layer: LayerDescriptor, x: QuantizedTensor, sched: StageSchedule, spec, report: StageReport):
    w = as_quantized(layer.weights, spec, "weights")
    b = as_quantized(layer.biases, spec, "bias")
    if layer.kind is LayerKind.GEMM:
        xin = x.values.reshape(-1, 1, 1)
        wv = w.values.reshape(w.dims[0], -1, 1, 1)
        attrs = ConvAttrs((1, 1))
    else:
        xin = x.values
        wv = w.values
        attrs = layer.attrs
    xp, ho, wo = _windows(xin.astype(np.float64), attrs, 0.0)
    wv = wv.astype(np.float64)
    pixels = ho * wo
    cin, cout = sched.in_channels, sched.out_channels
    acc = np.zeros((cout * sched.groups, pixels), dtype=np.float64)
    idx = np.concatenate([np.arange(lo, hi) for lo, hi in sched.channel_slabs]) if sched.channel_slabs else np.arange(0)
    if np.array_equal(idx, np.arange(cin)):
        idx = slice(None)  # in-order slabs: a view instead of a gather
    n_idx = len(np.arange(cin)[idx])

    for g in range(sched.groups):
        taps = [
            _tap(xp[g * cin:(g + 1) * cin], attrs, r, c, ho, wo).reshape(cin, pixels)[idx]
            for r, c in sched.taps
        ]
        for lo, hi in sched.lane_passes:
            lanes = slice(g * cout + lo, g * cout + hi)
            for (r, c), patch in zip(sched.taps, taps):
                acc[lanes] += wv[lanes, :, r, c][:, idx] @ patch
                report.mac_count += (hi - lo) * n_idx * pixels

    if x.m != spec.m_in:
        raise ConfigError(f"layer {layer.index}: input carries m={x.m} but the table says m_in={spec.m_in}")
    acc_m = x.m + w.m
    acc = acc.astype(np.int64)
    if b is not None:
        bias = b.values.astype(np.int64).reshape(-1, 1)
        acc = acc + rounding_shift(bias, b.m - acc_m)
    acc, sat = saturate(acc, 32)
    report.saturation_events += sat
    if layer.has_relu:
        acc = np.maximum(acc, 0)
    out, sat = saturate(rounding_shift(acc, acc_m - spec.m_out))
    report.saturation_events += sat
    o = layer.out_shape
    return QuantizedTensor((o.c, o.h, o.w), out.reshape(o.c, o.h, o.w), spec.m_out)


def _pool(layer: LayerDescriptor, x: QuantizedTensor, sched: StageSchedule) -> QuantizedTensor:
    attrs = layer.attrs
    xp, ho, wo = _windows(x.values.astype(np.int16), attrs, np.iinfo(np.int8).min)
    out = np.empty((x.dims[0], ho, wo), dtype=np.int16)
    for lo, hi in sched.lane_passes:
        lane = xp[lo:hi]
        res = None
        for r in range(attrs.ks[0]):
            for c in range(attrs.ks[1]):
                t = _tap(lane, attrs, r, c, ho, wo)
                res = t if res is None else np.maximum(res, t)
        out[lo:hi] = res
    if layer.has_relu:
        out = np.maximum(out, 0)
    return QuantizedTensor(out.shape, out, x.m)


def _check_input(stage: PipelineStage, x: QuantizedTensor) -> None:
    want = stage.in_shape
    got = x.dims
    if stage.is_fc:
        if int(np.prod(got)) != want.size:
            raise InputShapeError(f"stage {stage.index}: expected {want.size} inputs, got {got}")
    elif tuple(got) != (want.c, want.h, want.w):
        raise InputShapeError(f"stage {stage.index}: expected {want}, got {'x'.join(map(str, got))}")


def run_stage(
    stage: PipelineStage,
    x: QuantizedTensor,
    opt: HardwareOption,
    specs: QuantTable,
    schedule: StageSchedule | None = None,
    validate: bool = True,
) -> tuple[QuantizedTensor, StageReport]:
    _check_input(stage, x)
    sched = schedule or build_schedule(stage, opt)
    if validate:
        check_schedule(sched, stage)
    report = StageReport(stage.index, "fc" if stage.is_fc else "conv" if stage.conv else "pool")
    report.passes = sched.passes
    y = x
    if stage.conv is not None:
        y = _conv(stage.conv, y, sched, specs[stage.conv.index], report)
    if stage.pool is not None:
        pool_sched = sched if stage.conv is None else build_schedule(
            PipelineStage(pool=stage.pool, index=stage.index), opt
        )
        y = _pool(stage.pool, y, pool_sched)
    return y, report


def quantize_stages(stages: Sequence[PipelineStage], specs: QuantTable) -> list[PipelineStage]:
    """Copies of ``stages`` whose parameters are quantized once, up front."""
    out = []
    for stage in stages:
        members = {}
        for role in ("conv", "pool"):
            layer = getattr(stage, role)
            if layer is not None and layer.weights is not None:
                spec = specs[layer.index]
                layer = replace(
                    layer,
                    weights=as_quantized(layer.weights, spec, "weights"),
                    biases=as_quantized(layer.biases, spec, "bias"),
                )
            members[role] = layer
        out.append(replace(stage, **members))
    return out


def quantize_input(x: np.ndarray, stages: Sequence[PipelineStage], specs: QuantTable) -> QuantizedTensor:
    first = stages[0].layers[0]
    return quantize_array(x, specs[first.index].m_in)


def run_network(
    stages: Sequence[PipelineStage],
    x: QuantizedTensor | np.ndarray,
    opt: HardwareOption,
    specs: QuantTable,
) -> tuple[QuantizedTensor, list[StageReport]]:
    if not isinstance(x, QuantizedTensor):
        x = quantize_input(x, stages, specs)
    reports = []
    for stage in stages:
        x, rep = run_stage(stage, x, opt, specs)
        reports.append(rep)
    return x, reports


def softmax(logits: QuantizedTensor) -> np.ndarray:
    z = logits.dequantize().ravel()
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class EquivalenceResult:
    ok: bool
    mismatches: dict = field(default_factory=dict)  # option -> differing flat indices

    def __bool__(self) -> bool:
        return self.ok


def lane_equivalence_check(
    stage: PipelineStage,
    x: QuantizedTensor,
    opts: Sequence[HardwareOption],
    specs: QuantTable,
    schedules: Optional[dict] = None,
) -> EquivalenceResult:
    """Run the stage under every option and compare outputs bit for bit.

    ``schedules`` may map an option to a hand-made schedule, which is then run
    without the coverage check (used to prove the check catches bad plans).
    """
    schedules = schedules or {}
    outputs = []
    for opt in opts:
        sched = schedules.get(opt)
        y, _ = run_stage(stage, x, opt, specs, schedule=sched, validate=sched is None)
        outputs.append((opt, y.values.ravel()))
    ref = outputs[0][1]
    mismatches = {}
    for opt, vals in outputs[1:]:
        diff = np.flatnonzero(vals != ref)
        if diff.size:
            mismatches[opt] = diff.tolist()
    return EquivalenceResult(not mismatches, mismatches)


# --------------------------------------------------------------------------
# float reference and shift selection


def _float_param(t) -> np.ndarray | None:
    if t is None:
        return None
    if isinstance(t, QuantizedTensor):
        return t.dequantize()
    return t.to_numpy().astype(np.float64)


def float_layer(layer: LayerDescriptor, x: np.ndarray, weights=None, biases=None) -> np.ndarray:
    """Float evaluation of one layer (ReLU included, softmax left out).

    ``weights``/``biases`` override the layer parameters, e.g. with
    dequantized values.
    """
    o = layer.out_shape
    if layer.kind is LayerKind.MAXPOOL:
        xp, ho, wo = _windows(np.asarray(x, dtype=np.float64), layer.attrs, -np.inf)
        taps = [_tap(xp, layer.attrs, r, c, ho, wo) for r in range(layer.attrs.ks[0]) for c in range(layer.attrs.ks[1])]
        y = np.max(taps, axis=0)
    else:
        w = _float_param(layer.weights) if weights is None else np.asarray(weights, dtype=np.float64)
        b = _float_param(layer.biases) if biases is None else np.asarray(biases, dtype=np.float64)
        if layer.kind is LayerKind.GEMM:
            y = (w.reshape(o.c, -1) @ np.asarray(x, dtype=np.float64).ravel())[:, None]
        else:
            a = layer.attrs
            g = a.group
            xp, ho, wo = _windows(np.asarray(x, dtype=np.float64), a, 0.0)
            cin, cout = layer.in_shape.c // g, o.c // g
            y = np.empty((o.c, ho * wo))
            for k in range(g):
                cols = np.stack(
                    [_tap(xp[k * cin:(k + 1) * cin], a, r, c, ho, wo) for r in range(a.ks[0]) for c in range(a.ks[1])],
                    axis=1,
                ).reshape(cin * a.ks[0] * a.ks[1], ho * wo)
                y[k * cout:(k + 1) * cout] = w[k * cout:(k + 1) * cout].reshape(cout, -1) @ cols
        if b is not None:
            y = y + b.reshape(-1, 1)
    if layer.has_relu:
        y = np.maximum(y, 0)
    return y.reshape(o.c, o.h, o.w)


def float_network(stages: Sequence[PipelineStage], x: np.ndarray) -> np.ndarray:
    """Full-precision forward pass ending at the logits."""
    y = np.asarray(x, dtype=np.float64)
    for stage in stages:
        for layer in stage.layers:
            y = float_layer(layer, y)
    return y.ravel()


def _fit_shift(peak: float, lo: int = -8, hi: int = 15, width: int = 8) -> int:
    """Largest m with peak * 2**m still inside the signed range."""
    limit = (1 << (width - 1)) - 1
    if peak <= 0:
        return hi
    return int(np.clip(np.floor(np.log2(limit / peak)), lo, hi))


def choose_shifts(
    stages: Sequence[PipelineStage],
    samples: Sequence[np.ndarray],
    headroom: float = 2.0,
    bias_bits: int = 8,
    drift_safe: bool = True,
    percentile: float = 100.0,
) -> QuantTable:
    """Per-layer shifts from float activation ranges over ``samples``.

    Activation peaks (the ``percentile`` of |activation| per sample, 100
    meaning the maximum) are widened by ``headroom``; a percentile below 100
    trades a few saturated outliers for finer resolution.  With ``drift_safe`` every layer also satisfies the
    preconditions of :func:`cnnfit.quant.drift_bound`
    (m_in + m_w - m_out >= 7 and m_out <= m_bias <= m_in + m_w).
    """
    layers = expand_stages(list(stages))
    peaks = {layer.index: 0.0 for layer in layers}
    in_peak = 0.0
    for x in samples:
        y = np.asarray(x, dtype=np.float64)
        in_peak = max(in_peak, float(np.percentile(np.abs(y), percentile)))
        for layer in layers:
            y = float_layer(layer, y)
            peaks[layer.index] = max(peaks[layer.index], float(np.percentile(np.abs(y), percentile)))
    table = QuantTable(default=QuantSpec.uniform(6, bias_bits))
    m_in = _fit_shift(in_peak * headroom)
    for layer in layers:
        if layer.kind is LayerKind.MAXPOOL:
            table.layers[layer.index] = QuantSpec(m_in, m_in, m_in, m_in, bias_bits=bias_bits)
            continue
        m_w = _fit_shift(float(np.max(np.abs(_float_param(layer.weights)))))
        m_out = _fit_shift(peaks[layer.index] * headroom)
        if drift_safe:
            m_out = min(m_out, m_in + m_w - 7)
        b = _float_param(layer.biases)
        m_b = _fit_shift(float(np.max(np.abs(b))) if b is not None else 0.0, width=bias_bits, hi=m_in + m_w)
        if drift_safe:
            m_b = max(m_b, m_out)
        table.layers[layer.index] = QuantSpec(m_w, m_b, m_in, m_out, bias_bits=bias_bits)
        m_in = m_out
    return table


# --------------------------------------------------------------------------
# raw input files: a text header line "dims C H W", then float32 LE planar CHW


def write_input(path, x: np.ndarray) -> None:
    x = np.asarray(x, dtype="<f4")
    header = "dims " + " ".join(str(d) for d in x.shape) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(x.tobytes())


def read_input(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    head, sep, payload = data.partition(b"\n")
    fields = head.split()
    if not sep or not fields or fields[0] != b"dims":
        raise InputShapeError(f"{path}: missing 'dims' header line")
    try:
        dims = tuple(int(v) for v in fields[1:])
    except ValueError:
        raise InputShapeError(f"{path}: bad dims header {head!r}") from None
    if not dims or min(dims) < 1:
        raise InputShapeError(f"{path}: bad dims header {head!r}")
    want = int(np.prod(dims)) * 4
    if len(payload) != want:
        raise InputShapeError(f"{path}: header promises {want} bytes of float32, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
