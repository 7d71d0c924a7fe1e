"""Resource cost model standing in for the vendor compiler's estimator.

Absolute resource counts are affine in the lane/vector parallelism:

    dsp        = a0 + a1 * ni*nl
    alm        = b0 + b1 * nl + b2 * ni*nl
    mem_bits   = c0 + c1 * ni*nl + c2 * S            (S: largest stage buffer, bits)
    ram_blocks = ceil(d0 + d1 * nl + mem_bits / K)   (K: packing bits per block)

The shipped coefficients are calibrated to the two measured AlexNet design
points of the Cyclone V 5CSEMA5 at (8, 8) and the Arria 10 GX1150 at
(16, 32).  Two anchors pin two coefficients per family, so the rest are
priors: ``b1`` (per-lane pooling/pipe logic), ``c2`` (buffer-size term, not
identifiable from single-model anchors) and ``K``.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import ConfigError, RankDeficient, UnknownTarget
from .ir import PipelineStage

CATALOG_ENV = "CNNFIT_TARGETS"

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HardwareTarget:
    name: str
    alm_capacity: float
    dsp_capacity: float
    ram_block_capacity: float
    mem_bit_capacity: float

    def __post_init__(self):
        caps = (self.alm_capacity, self.dsp_capacity, self.ram_block_capacity, self.mem_bit_capacity)
        if min(caps) <= 0:
            raise ConfigError(f"target {self.name!r}: capacities must be positive")


@dataclass(frozen=True, order=True)
class HardwareOption:
    n_i: int
    n_l: int

    def __post_init__(self):
        if self.n_i < 1 or self.n_l < 1:
            raise ValueError(f"hardware option {self} needs n_i, n_l >= 1")

    @property
    def parallelism(self) -> int:
        return self.n_i * self.n_l

    def __str__(self) -> str:
        return f"({self.n_i},{self.n_l})"


@dataclass(frozen=True)
class ResourceCounts:
    alm: float
    dsp: float
    ram_blocks: float
    mem_bits: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alm, self.dsp, self.ram_blocks, self.mem_bits)


@dataclass(frozen=True)
class ResourceEstimate:
    """Utilization percentages; p_reg tracks pipe/FIFO storage against the memory-bit capacity."""

    p_lut: float
    p_dsp: float
    p_mem: float
    p_reg: float
    counts: ResourceCounts | None = None

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.p_lut, self.p_dsp, self.p_mem, self.p_reg)

    @classmethod
    def from_counts(cls, counts: ResourceCounts, target: HardwareTarget) -> "ResourceEstimate":
        return cls(
            100.0 * counts.alm / target.alm_capacity,
            100.0 * counts.dsp / target.dsp_capacity,
            100.0 * counts.ram_blocks / target.ram_block_capacity,
            100.0 * counts.mem_bits / target.mem_bit_capacity,
            counts,
        )


class Estimator(Protocol):
    """Anything that maps a design point to utilization, e.g. a vendor-compiler adapter."""

    def estimate(
        self, stages: Sequence[PipelineStage], opt: HardwareOption, target: HardwareTarget
    ) -> ResourceEstimate: ...


# --------------------------------------------------------------------------
# coefficients and calibration


@dataclass(frozen=True)
class CostCoefficients:
    a0: float = 0.0
    a1: float = 0.0
    b0: float = 0.0
    b1: float = 500.0
    b2: float = 0.0
    c0: float = 0.0
    c1: float = 0.0
    c2: float = 0.0
    d0: float = 0.0
    d1: float = 0.0
    bits_per_block: float = 20480.0


# coefficients that the anchors cannot pin are held at these values
PRIORS = CostCoefficients()


def max_stage_buffer_bits(stages: Sequence[PipelineStage]) -> int:
    return 8 * max(s.buffer_bytes for s in stages)


@dataclass
class CostModel:
    coeffs: CostCoefficients = field(default_factory=lambda: default_coefficients())

    def counts(self, stages: Sequence[PipelineStage], opt: HardwareOption) -> ResourceCounts:
        if not stages:
            raise ValueError("cannot estimate an empty stage list")
        k = self.coeffs
        par = opt.parallelism
        dsp = k.a0 + k.a1 * par
        alm = k.b0 + k.b1 * opt.n_l + k.b2 * par
        mem_bits = k.c0 + k.c1 * par + k.c2 * max_stage_buffer_bits(stages)
        # small tolerance so calibrated anchors land on their integer block count
        ram = math.ceil(k.d0 + k.d1 * opt.n_l + mem_bits / k.bits_per_block - 1e-6)
        return ResourceCounts(alm, dsp, float(ram), mem_bits)

    def estimate(
        self, stages: Sequence[PipelineStage], opt: HardwareOption, target: HardwareTarget
    ) -> ResourceEstimate:
        return ResourceEstimate.from_counts(self.counts(stages, opt), target)


@dataclass(frozen=True)
class Anchor:
    stages: Sequence[PipelineStage]
    option: HardwareOption
    counts: ResourceCounts


def _solve(rows: list[list[float]], rhs: list[float], family: str) -> np.ndarray:
    a = np.asarray(rows, dtype=np.float64)
    b = np.asarray(rhs, dtype=np.float64)
    if np.linalg.matrix_rank(a) < a.shape[1]:
        raise RankDeficient(f"anchors cannot pin the {family} coefficients")
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    return sol


def calibrate(anchors: Iterable[Anchor], priors: CostCoefficients = PRIORS) -> CostCoefficients:
    """Least-squares fit of the free coefficients of each resource family.

    Each family has two free coefficients (an intercept and the parallelism
    or lane slope); the remaining ones come from ``priors``.  Exact when two
    independent anchors are given.
    """
    anchors = list(anchors)
    if len(anchors) < 2:
        raise RankDeficient(f"need at least 2 anchors, got {len(anchors)}")
    p = priors
    par = [a.option.parallelism for a in anchors]
    lanes = [a.option.n_l for a in anchors]
    buf = [max_stage_buffer_bits(a.stages) for a in anchors]

    a0, a1 = _solve([[1, x] for x in par], [a.counts.dsp for a in anchors], "DSP")
    b0, b2 = _solve(
        [[1, x] for x in par], [a.counts.alm - p.b1 * n for a, n in zip(anchors, lanes)], "ALM"
    )
    c0, c1 = _solve(
        [[1, x] for x in par], [a.counts.mem_bits - p.c2 * s for a, s in zip(anchors, buf)], "memory-bit"
    )
    d0, d1 = _solve(
        [[1, n] for n in lanes],
        [a.counts.ram_blocks - a.counts.mem_bits / p.bits_per_block for a in anchors],
        "RAM-block",
    )
    fitted = dict(a0=a0, a1=a1, b0=b0, b2=b2, c0=c0, c1=c1, d0=d0, d1=d1)
    return replace(p, **{k: float(v) for k, v in fitted.items()})


def calibrate_or_default(anchors: Iterable[Anchor], priors: CostCoefficients = PRIORS) -> CostCoefficients:
    try:
        return calibrate(anchors, priors)
    except RankDeficient as exc:
        log.warning("%s; falling back to the shipped coefficients", exc)
        return default_coefficients()


# measured AlexNet design points: (option, ALM, DSP, RAM blocks, memory bits)
MEASURED_POINTS = (
    (HardwareOption(8, 8), ResourceCounts(26_000, 72, 397, 2_000_000)),
    (HardwareOption(16, 32), ResourceCounts(129_000, 300, 1091, 16_000_000)),
)


def default_anchors() -> list[Anchor]:
    from .zoo import alexnet_stages

    stages = alexnet_stages()
    return [Anchor(stages, opt, counts) for opt, counts in MEASURED_POINTS]


@lru_cache(maxsize=None)
def default_coefficients() -> CostCoefficients:
    return calibrate(default_anchors())


# --------------------------------------------------------------------------
# target catalog

DEFAULT_CATALOG = """\
# name      ALMs     DSPs  RAM-blocks  memory-bits
5csema4     15000    83    321         3287040
5csema5     32000    87    397         4000000
arria10     427000   1516  2713        55500000
"""


def parse_catalog(text: str) -> dict[str, HardwareTarget]:
    targets = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ConfigError(f"catalog line {lineno}: expected name and 4 capacities")
        try:
            caps = [float(x) for x in fields[1:]]
        except ValueError as exc:
            raise ConfigError(f"catalog line {lineno}: {exc}") from exc
        targets[fields[0].lower()] = HardwareTarget(fields[0].lower(), *caps)
    return targets


def load_catalog(path=None) -> dict[str, HardwareTarget]:
    path = path or os.environ.get(CATALOG_ENV)
    if path:
        return parse_catalog(Path(path).read_text())
    return parse_catalog(DEFAULT_CATALOG)


def get_target(name: str, catalog: dict[str, HardwareTarget] | None = None) -> HardwareTarget:
    catalog = catalog if catalog is not None else load_catalog()
    try:
        return catalog[name.lower()]
    except KeyError:
        raise UnknownTarget(f"unknown target {name!r}; known: {', '.join(sorted(catalog))}") from None
