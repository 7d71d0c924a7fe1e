"""Fixed-point (N, m) quantization: a stored integer N stands for N * 2**-m."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .onnx_wire import RawTensor

WIDTH = 8


@dataclass(frozen=True)
class QuantSpec:
    """Per-layer shift exponents for weights, biases, input and output."""

    m_weights: int
    m_bias: int
    m_in: int
    m_out: int
    width: int = WIDTH
    bias_bits: int = 8

    def __post_init__(self):
        if self.width != WIDTH:
            raise ConfigError(f"only {WIDTH}-bit data paths are supported")
        if self.bias_bits not in (8, 32):
            raise ConfigError(f"bias_bits must be 8 or 32, got {self.bias_bits}")

    @classmethod
    def uniform(cls, m: int, bias_bits: int = 8) -> "QuantSpec":
        return cls(m, m, m, m, bias_bits=bias_bits)


@dataclass
class QuantTable:
    """QuantSpec per layer index, with a global fallback."""

    default: QuantSpec = field(default_factory=lambda: QuantSpec.uniform(6))
    layers: dict[int, QuantSpec] = field(default_factory=dict)

    def __getitem__(self, index: int) -> QuantSpec:
        return self.layers.get(index, self.default)

    def render(self) -> str:
        lines = ["# layer m_weights m_bias m_in m_out"]
        for idx in sorted(self.layers):
            s = self.layers[idx]
            lines.append(f"{idx} {s.m_weights} {s.m_bias} {s.m_in} {s.m_out}")
        return "\n".join(lines) + "\n"


def parse_quant_config(text: str, default_m: int = 6, bias_bits: int = 8) -> QuantTable:
    """Parse ``layer m_weights m_bias m_in m_out`` records (``#`` comments allowed)."""
    table = QuantTable(default=QuantSpec.uniform(default_m, bias_bits))
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.replace(",", " ").split()
        if len(fields) != 5:
            raise ConfigError(f"line {lineno}: expected 5 fields, got {len(fields)}")
        try:
            idx, mw, mb, mi, mo = (int(x) for x in fields)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
        if idx in table.layers:
            raise ConfigError(f"line {lineno}: duplicate record for layer {idx}")
        table.layers[idx] = QuantSpec(mw, mb, mi, mo, bias_bits=bias_bits)
    return table


def load_quant_config(path, default_m: int = 6, bias_bits: int = 8) -> QuantTable:
    return parse_quant_config(Path(path).read_text(), default_m, bias_bits)


@dataclass
class QuantizedTensor:
    dims: tuple[int, ...]
    values: np.ndarray
    m: int
    saturated: int = 0
    bits: int = WIDTH

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        dtype = np.int8 if self.bits == 8 else np.int32
        self.values = np.asarray(self.values).astype(dtype, copy=False).reshape(self.dims)

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * 2.0 ** -self.m

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.m == other.m
            and self.bits == other.bits
            and np.array_equal(self.values, other.values)
        )


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_array(x, m: int, bits: int = WIDTH) -> QuantizedTensor:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    scaled = round_half_away(np.ldexp(x, m))
    saturated = int(np.count_nonzero((scaled < lo) | (scaled > hi)))
    return QuantizedTensor(x.shape, np.clip(scaled, lo, hi), m, saturated, bits)


def quantize_tensor(t: RawTensor, spec: QuantSpec | int, role: str = "weights") -> QuantizedTensor:
    """Quantize a float32 tensor with the shift that ``spec`` assigns to ``role``.

    ``role`` is one of ``weights``, ``bias``, ``in``, ``out``; an int ``spec``
    is used as the shift directly.
    """
    m, bits = _shift(spec, role)
    if t.dtype != "float32":
        raise ValueError(f"tensor {t.name!r} is {t.dtype}, expected float32")
    return quantize_array(t.to_numpy(), m, bits)


def _shift(spec: QuantSpec | int, role: str) -> tuple[int, int]:
    if isinstance(spec, int):
        return spec, WIDTH
    m = {"weights": spec.m_weights, "bias": spec.m_bias, "in": spec.m_in, "out": spec.m_out}[role]
    return m, spec.bias_bits if role == "bias" else WIDTH


def quantization_error(t: RawTensor, spec: QuantSpec | int, role: str = "weights") -> float:
    """Largest |x - dequantize(quantize(x))| over the tensor."""
    q = quantize_tensor(t, spec, role)
    if q.values.size == 0:
        return 0.0
    return float(np.max(np.abs(t.to_numpy().astype(np.float64) - q.dequantize())))


def as_quantized(t, spec: QuantSpec, role: str) -> QuantizedTensor | None:
    """Float tensors get quantized; int8 tensors are taken as already in (N, m) form."""
    if t is None or isinstance(t, QuantizedTensor):
        return t
    m, bits = _shift(spec, role)
    if t.dtype == "float32":
        return quantize_array(t.to_numpy(), m, bits)
    if t.dtype in ("int8", "int32"):
        return QuantizedTensor(t.dims, t.to_numpy(), m, bits=8 if t.dtype == "int8" else 32)
    raise ValueError(f"tensor {t.name!r}: cannot use {t.dtype} as layer parameters")


def rounding_shift(acc: np.ndarray, shift: int) -> np.ndarray:
    """Divide integer ``acc`` by 2**shift, rounding half away from zero (left shift if negative)."""
    acc = np.asarray(acc, dtype=np.int64)
    if shift <= 0:
        return acc << -shift
    half = np.int64(1) << (shift - 1)
    mag = (np.abs(acc) + half) >> shift
    return np.where(acc < 0, -mag, mag)


def saturate(x: np.ndarray, bits: int = WIDTH) -> tuple[np.ndarray, int]:
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    count = int(np.count_nonzero((x < lo) | (x > hi)))
    return np.clip(x, lo, hi), count


def drift_bound(accumulation_length: int, m_out: int) -> float:
    """Documented worst-case |dequantized - float| for one layer output: L * 2**-m_out.

    Holds for L >= 2 when nothing saturates, m_in + m_w - m_out >= 7 and
    m_out <= m_bias <= m_in + m_w: weight rounding then contributes at most
    L * 2**-(m_out+1), bias and output rounding 2**-(m_out+1) each.
    """
    return accumulation_length * math.ldexp(1.0, -m_out)
