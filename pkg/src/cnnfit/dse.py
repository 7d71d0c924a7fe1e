"""Design-space exploration over the (vector width, lane count) grid."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import reduce
from typing import Optional, Sequence

import numpy as np

from .cost import CostModel, Estimator, HardwareOption, HardwareTarget, ResourceEstimate
from .errors import EmptySpace, NoFeasibleOption
from .ir import LayerDescriptor, LayerKind, PipelineStage, expand_stages


def divisors(n: int) -> list[int]:
    small = [d for d in range(1, math.isqrt(n) + 1) if n % d == 0]
    return sorted(set(small + [n // d for d in small]))


@dataclass(frozen=True)
class LegalitySpace:
    ni_candidates: tuple[int, ...]
    nl_candidates: tuple[int, ...]

    @property
    def options(self) -> list[HardwareOption]:
        return [HardwareOption(ni, nl) for ni in self.ni_candidates for nl in self.nl_candidates]

    def __len__(self) -> int:
        return len(self.ni_candidates) * len(self.nl_candidates)

    def __contains__(self, opt: HardwareOption) -> bool:
        return opt.n_i in self.ni_candidates and opt.n_l in self.nl_candidates


def candidate_space(widths: Sequence[int], channels: Sequence[int]) -> LegalitySpace:
    """Divisors of the gcd of all vector widths and of all channel counts."""
    gw = reduce(math.gcd, widths, 0) or 1
    gc = reduce(math.gcd, channels, 0) or 1
    return LegalitySpace(tuple(divisors(gw)), tuple(divisors(gc)))


def layer_constraints(layers: Sequence[LayerDescriptor]) -> tuple[list[int], list[int]]:
    """Per-layer vector widths and lane channel counts.

    A convolution fetches vectors along its (per-group) input depth and maps
    lanes to output channels; a fully-connected layer vectorizes its flattened
    input and is exempt from the lane constraint.  The first layer reads raw
    image planes, which the read kernel zero-pads up to the vector width, so
    its depth only counts when nothing else constrains the width.
    """
    widths, channels = [], []
    for pos, layer in enumerate(layers):
        if layer.kind is LayerKind.CONV:
            if pos > 0:
                widths.append(layer.in_shape.c // layer.attrs.group)
            channels.append(layer.out_shape.c)
        elif layer.kind is LayerKind.MAXPOOL:
            channels.append(layer.out_shape.c)
        else:
            widths.append(layer.in_shape.size)
    if not widths and layers[0].kind is LayerKind.CONV:
        widths.append(layers[0].in_shape.c // layers[0].attrs.group)
    return widths, channels


def legal_space(
    layers: Sequence[LayerDescriptor] | Sequence[PipelineStage], require_parallel: bool = False
) -> LegalitySpace:
    if not layers:
        raise ValueError("legal_space needs at least one layer")
    if isinstance(layers[0], PipelineStage):
        layers = expand_stages(layers)
    space = candidate_space(*layer_constraints(layers))
    if require_parallel and len(space) == 1:
        raise EmptySpace("no parallel option: vector widths and channel counts are coprime")
    return space


# --------------------------------------------------------------------------
# reward shaping


@dataclass(frozen=True)
class Thresholds:
    t_lut: float = 90.0
    t_dsp: float = 90.0
    t_mem: float = 90.0
    t_reg: float = 90.0

    def __post_init__(self):
        for v in self.as_tuple():
            if not 0 < v <= 100:
                raise ValueError(f"threshold {v} outside (0, 100]")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.t_lut, self.t_dsp, self.t_mem, self.t_reg)

    @classmethod
    def uniform(cls, t: float) -> "Thresholds":
        return cls(t, t, t, t)

    @classmethod
    def parse(cls, text: str) -> "Thresholds":
        vals = [float(x) for x in text.split(",")]
        if len(vals) == 1:
            return cls.uniform(vals[0])
        if len(vals) != 4:
            raise ValueError(f"expected 1 or 4 comma-separated thresholds, got {text!r}")
        return cls(*vals)


def f_avg(est: ResourceEstimate) -> float:
    return (est.p_lut + est.p_dsp + est.p_mem + est.p_reg) / 4


def exceeds(est: ResourceEstimate, th: Thresholds) -> bool:
    return any(p > t for p, t in zip(est.as_tuple(), th.as_tuple()))


@dataclass(frozen=True)
class RewardOutcome:
    reward: float
    f_max: float
    h_best: Optional[HardwareOption]


def reward_step(
    est: ResourceEstimate,
    th: Thresholds,
    f_max_so_far: float,
    opt: HardwareOption,
    beta: float = 0.01,
) -> RewardOutcome:
    """One reward-shaping update; ``h_best`` is set only when the option improved F_max."""
    if exceeds(est, th):
        return RewardOutcome(-1.0, f_max_so_far, None)
    score = f_avg(est)
    if score > f_max_so_far:
        return RewardOutcome(beta * score, score, opt)
    return RewardOutcome(0.0, f_max_so_far, None)


# --------------------------------------------------------------------------
# exploration


@dataclass(frozen=True)
class TraceEntry:
    step: int
    option: HardwareOption
    estimate: ResourceEstimate
    f_avg: float
    reward: float
    f_max: float


@dataclass
class ExplorationResult:
    strategy: str
    h_best: Optional[HardwareOption]
    f_max: float
    evaluations: int
    steps: int
    trace: list[TraceEntry] = field(default_factory=list)
    # distinct estimator calls made up to the moment h_best was last improved
    evaluations_to_best: int = 0

    def render_trace(self) -> str:
        lines = ["# step option p_lut p_dsp p_mem p_reg f_avg reward f_max"]
        for e in self.trace:
            p = e.estimate
            lines.append(
                f"{e.step} ni={e.option.n_i} nl={e.option.n_l} "
                f"{p.p_lut:.3f} {p.p_dsp:.3f} {p.p_mem:.3f} {p.p_reg:.3f} "
                f"{e.f_avg:.3f} {e.reward:.6f} {e.f_max:.3f}"
            )
        return "\n".join(lines) + "\n"


def _better(a: tuple[float, HardwareOption], b: tuple[float, HardwareOption] | None) -> bool:
    if b is None:
        return True
    return (a[0], a[1].parallelism, a[1].n_l) > (b[0], b[1].parallelism, b[1].n_l)


def brute_force(
    space: LegalitySpace,
    stages: Sequence[PipelineStage],
    target: HardwareTarget,
    th: Thresholds = Thresholds(),
    estimator: Estimator | None = None,
    beta: float = 0.01,
    max_workers: int | None = None,
) -> ExplorationResult:
    """Evaluate every option and keep the feasible one with the highest F_avg.

    Ties go to the larger n_i*n_l, then the larger n_l.
    """
    if len(space) == 0:
        raise EmptySpace("empty design space")
    estimator = estimator or CostModel()
    options = space.options
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            estimates = list(pool.map(lambda o: estimator.estimate(stages, o, target), options))
    else:
        estimates = [estimator.estimate(stages, o, target) for o in options]

    trace = []
    f_max = 0.0
    best = None
    best_at = 0
    for step, (opt, est) in enumerate(zip(options, estimates), 1):
        out = reward_step(est, th, f_max, opt, beta)
        f_max = out.f_max
        trace.append(TraceEntry(step, opt, est, f_avg(est), out.reward, f_max))
        if not exceeds(est, th) and _better((f_avg(est), opt), best):
            best = (f_avg(est), opt)
            best_at = step
    if best is None:
        raise NoFeasibleOption(f"no option fits {target.name} within thresholds {th.as_tuple()}")
    return ExplorationResult("bf", best[1], best[0], len(options), len(options), trace, best_at)


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.1
    beta: float = 0.01
    episode_length: Optional[int] = None  # None: twice the number of options
    episodes: int = 50
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    learning_rate: float = 0.5

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.episodes < 1 or (self.episode_length is not None and self.episode_length < 1):
            raise ValueError("episodes and episode_length must be >= 1")

    def epsilon(self, episode: int) -> float:
        if self.episodes == 1:
            return self.epsilon_end
        frac = episode / (self.episodes - 1)
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac


# actions: step the lane index, the vector index, or both; each wraps to 0 on its own
ACTIONS = ((0, 1), (1, 0), (1, 1))


def _move(state: tuple[int, int], action: int, shape: tuple[int, int]) -> tuple[int, int]:
    di, dl = ACTIONS[action]
    i = state[0] + di
    j = state[1] + dl
    return (i if i < shape[0] else 0, j if j < shape[1] else 0)


def rl_explore(
    space: LegalitySpace,
    stages: Sequence[PipelineStage],
    target: HardwareTarget,
    th: Thresholds = Thresholds(),
    cfg: AgentConfig = AgentConfig(),
    seed: int = 0,
    estimator: Estimator | None = None,
) -> ExplorationResult:
    """Tabular Q-learning over grid indices with time-limited episodes.

    Every episode restarts at the smallest (n_i, n_l); estimates are memoized
    so ``evaluations`` counts distinct estimator calls.
    """
    if len(space) == 0:
        raise EmptySpace("empty design space")
    estimator = estimator or CostModel()
    rng = np.random.default_rng(seed)
    shape = (len(space.ni_candidates), len(space.nl_candidates))
    q = np.zeros(shape + (len(ACTIONS),))
    episode_length = cfg.episode_length or 2 * len(space)
    memo: dict[HardwareOption, ResourceEstimate] = {}

    f_max = 0.0
    h_best = None
    best_at = 0
    trace: list[TraceEntry] = []
    step = 0

    def observe(state):
        nonlocal f_max, h_best, best_at, step
        opt = HardwareOption(space.ni_candidates[state[0]], space.nl_candidates[state[1]])
        if opt not in memo:
            memo[opt] = estimator.estimate(stages, opt, target)
        est = memo[opt]
        out = reward_step(est, th, f_max, opt, cfg.beta)
        if out.h_best is not None:
            h_best = out.h_best
            best_at = len(memo)
        f_max = out.f_max
        trace.append(TraceEntry(step, opt, est, f_avg(est), out.reward, f_max))
        return out.reward

    for episode in range(cfg.episodes):
        eps = cfg.epsilon(episode)
        state = (0, 0)
        observe(state)
        for _ in range(episode_length):
            step += 1
            if rng.random() < eps:
                action = int(rng.integers(len(ACTIONS)))
            else:
                vals = q[state]
                action = int(rng.choice(np.flatnonzero(vals == vals.max())))
            nxt = _move(state, action, shape)
            reward = observe(nxt)
            target_q = reward + cfg.gamma * q[nxt].max()
            q[state + (action,)] += cfg.learning_rate * (target_q - q[state + (action,)])
            state = nxt

    if h_best is None:
        raise NoFeasibleOption(f"no option fits {target.name} within thresholds {th.as_tuple()}")
    return ExplorationResult("rl", h_best, f_max, len(memo), step, trace, best_at)
