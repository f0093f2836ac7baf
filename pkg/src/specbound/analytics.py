"""Closed-form round-time and speedup model, its Monte-Carlo check, and trace replay.

Two different quantities are both commonly called alpha. This module only
uses ``accept_rate`` (per-token acceptance probability); the annealing
strength of the exit policy is ``anneal_alpha`` and never appears here.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import EngineConfig, PrefillCache, RoundTrace
from .model import ToyModel


@dataclass(frozen=True)
class SpeedupParams:
    L: int
    d_max: int
    w: float
    accept_rate: float
    t_ar: float = 1.0

    def __post_init__(self):
        if self.L < 2:
            raise ValueError(f"L must be >= 2, got {self.L}")
        if not 1 <= self.d_max < self.L:
            raise ValueError(f"d_max must lie in 1..L-1={self.L - 1}, got {self.d_max}")
        if not self.w >= 1:
            raise ValueError(f"w must be >= 1, got {self.w}")
        if not 0 <= self.accept_rate <= 1:
            raise ValueError(f"accept_rate must lie in [0, 1], got {self.accept_rate}")
        if not self.t_ar > 0:
            raise ValueError(f"t_ar must be positive, got {self.t_ar}")


def round_time(p: SpeedupParams) -> float:
    """Wall time of one round: ``w`` sequential drafts to ``d_max`` plus one joint pass."""
    return (p.w * p.d_max + p.L - p.d_max) / p.L * p.t_ar


def expected_accepted(a: float, w: float) -> float:
    """Mean accepted drafts when each is accepted independently with rate ``a``.

    The chain stops at the first rejection or after ``w`` drafts. ``a = 1``
    gives ``w``; ``w = inf`` gives ``a / (1 - a)``.
    """
    if not 0 <= a <= 1:
        raise ValueError(f"accept rate must lie in [0, 1], got {a}")
    if not w >= 0:
        raise ValueError(f"w must be >= 0, got {w}")
    if a == 1.0:
        if math.isinf(w):
            raise ValueError("unbounded width with certain acceptance diverges")
        return float(w)
    if math.isinf(w):
        return a / (1.0 - a)
    return a * (1.0 - a**w) / (1.0 - a)


def expected_accepted_sum(a: float, w: int) -> float:
    """Direct sum over the truncated geometric distribution, for cross-checking."""
    total = sum(k * a**k * (1.0 - a) for k in range(w))
    return total + w * a**w


def speedup(p: SpeedupParams) -> float:
    """Throughput ratio against full-depth decoding, bonus token excluded."""
    denom = p.w * p.d_max + p.L - p.d_max
    a = p.accept_rate
    if a == 1.0:
        return p.L * p.w / denom
    return p.L * a * (1.0 - a**p.w) / ((1.0 - a) * denom)


def monte_carlo_accepted(a: float, w: int, trials: int, seed: int = 0) -> tuple[float, float]:
    """Simulate ``trials`` rounds of i.i.d. Bernoulli acceptance; return (mean, standard error)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 0 <= a <= 1:
        raise ValueError(f"accept rate must lie in [0, 1], got {a}")
    if w < 1:
        raise ValueError("w must be >= 1")
    rng = np.random.default_rng(seed)
    accepted = np.cumprod(rng.random((trials, w)) < a, axis=1).sum(axis=1)
    mean = float(accepted.mean())
    se = float(accepted.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return mean, se


@dataclass(frozen=True)
class CostModel:
    """Idealized per-layer cost of replayed rounds.

    A sequential draft step costs ``t_ar / L`` per layer. A parallel pass
    over any number of positions costs ``t_ar / L`` per layer crossed.
    ``ignore_alignment`` drops the alignment term, which the closed form ignores.
    """
    t_ar: float = 1.0
    L: int = 12
    include_bonus: bool = True
    ignore_alignment: bool = False

    @property
    def layer_unit_cost(self) -> float:
        return self.t_ar / self.L

    @classmethod
    def for_config(cls, cfg: EngineConfig, t_ar: float = 1.0, ignore_alignment: bool = False) -> "CostModel":
        return cls(t_ar=t_ar, L=cfg.act.num_layers, include_bonus=not cfg.paper_faithful_bonus,
                   ignore_alignment=ignore_alignment)

    def round_cost(self, trace: RoundTrace) -> float:
        # Reuse extensions of earlier positions run alongside the current
        # attempt, layer by layer, so they add no sequential time.
        align = 0 if self.ignore_alignment else trace.align_layers
        return (trace.layer_units_draft + align + trace.verify_layers) * self.layer_unit_cost

    def counted_tokens(self, trace: RoundTrace) -> int:
        return trace.committed if self.include_bonus else trace.accepted_count


@dataclass(frozen=True)
class ReplayResult:
    seconds: float
    ar_seconds: float
    tokens: int
    rounds: int
    accepted: int
    drafted: int

    @property
    def compression_rate(self) -> float:
        return self.accepted / self.rounds if self.rounds else 0.0

    @property
    def speedup(self) -> float:
        """NaN when nothing was replayed, e.g. a decode that ended on its first token."""
        return self.ar_seconds / self.seconds if self.seconds > 0 else math.nan

    @property
    def accept_rate(self) -> float:
        return self.accepted / self.drafted if self.drafted else 0.0


def _as_trace(t) -> RoundTrace:
    if isinstance(t, RoundTrace):
        return t
    if isinstance(t, dict):
        return RoundTrace.from_dict(t)
    raise TypeError(f"expected a RoundTrace or trace record, got {type(t).__name__}")


def replay_cost(traces, cm: CostModel) -> ReplayResult:
    """Simulated time, compression rate and speedup of a sequence of rounds."""
    seconds = 0.0
    tokens = accepted = drafted = rounds = 0
    for raw in traces:
        t = _as_trace(raw)
        seconds += cm.round_cost(t)
        tokens += cm.counted_tokens(t)
        accepted += t.accepted_count
        drafted += len(t.drafts)
        rounds += 1
    return ReplayResult(seconds, tokens * cm.t_ar, tokens, rounds, accepted, drafted)


SWEEP_AXES = ("threshold", "anneal_alpha", "d_max", "w_max")
SWEEP_COLUMNS = ("axis_value", "empirical_sd", "empirical_cr", "analytic_sd", "accept_rate")


def config_with(cfg: EngineConfig, axis: str, value) -> EngineConfig:
    if axis == "threshold":
        return replace(cfg, act=replace(cfg.act, threshold=float(value)))
    if axis == "anneal_alpha":
        return replace(cfg, act=replace(cfg.act, anneal_alpha=float(value)))
    if axis == "d_max":
        return replace(cfg, d_max=int(value))
    if axis == "w_max":
        return replace(cfg, w_max=int(value))
    raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")


@dataclass
class SweepPoint:
    axis_value: float
    empirical_sd: float
    empirical_cr: float
    analytic_sd: float
    accept_rate: float
    replay: ReplayResult = field(repr=False)


@dataclass
class SweepResult:
    axis: str
    points: list[SweepPoint]

    @property
    def values(self) -> list[float]:
        return [p.axis_value for p in self.points]

    @property
    def empirical_sd(self) -> np.ndarray:
        return np.array([p.empirical_sd for p in self.points])

    @property
    def empirical_cr(self) -> np.ndarray:
        return np.array([p.empirical_cr for p in self.points])

    @property
    def analytic_sd(self) -> np.ndarray:
        return np.array([p.analytic_sd for p in self.points])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for p in sorted(self.points, key=lambda p: p.axis_value):
            writer.writerow([p.axis_value, repr(p.empirical_sd), repr(p.empirical_cr),
                             repr(p.analytic_sd), repr(p.accept_rate)])
        return buf.getvalue()


def analytic_overlay(replay: ReplayResult, L: int, d_max: int, t_ar: float = 1.0) -> float:
    """Closed-form speedup at the measured acceptance rate and mean draft width."""
    w = max(1.0, replay.drafted / replay.rounds) if replay.rounds else 1.0
    return speedup(SpeedupParams(L=L, d_max=d_max, w=w, accept_rate=replay.accept_rate, t_ar=t_ar))


def decode_prompts(model: ToyModel, prompts, cfg: EngineConfig,
                   prefills: PrefillCache | None = None) -> list[list[RoundTrace]]:
    """Traces per prompt for one config."""
    prefills = prefills or PrefillCache(model)
    groups = []
    for prompt in prompts:
        session = prefills.session(prompt, cfg)
        session.emit_first()
        groups.append(session.run().traces)
    return groups


def sweep(model: ToyModel, prompts, base_cfg: EngineConfig, axis: str, values,
          t_ar: float = 1.0, ignore_alignment: bool = False) -> SweepResult:
    """Decode every prompt at each axis value and replay the traces through the cost model."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    prefills = PrefillCache(model)
    points = []
    for value in sorted(values):
        cfg = config_with(base_cfg, axis, value)
        cfg.validate(model.num_layers)
        groups = decode_prompts(model, prompts, cfg, prefills)
        cm = CostModel.for_config(cfg, t_ar=t_ar, ignore_alignment=ignore_alignment)
        replay = replay_cost([t for g in groups for t in g], cm)
        points.append(SweepPoint(
            axis_value=value,
            empirical_sd=replay.speedup,
            empirical_cr=replay.compression_rate,
            analytic_sd=analytic_overlay(replay, model.num_layers, cfg.d_max, t_ar),
            accept_rate=replay.accept_rate,
            replay=replay,
        ))
    return SweepResult(axis, points)


@dataclass
class SpeedupHistogram:
    edges: np.ndarray
    counts: np.ndarray
    per_prompt_sd: np.ndarray    # NaN for prompts without any round
    prompt_index: np.ndarray     # prompts that entered the histogram

    @property
    def percentages(self) -> np.ndarray:
        return 100.0 * self.counts / self.counts.sum()

    @property
    def values(self) -> np.ndarray:
        return self.per_prompt_sd[self.prompt_index]

    @property
    def min(self) -> float:
        return float(self.values.min())

    @property
    def max(self) -> float:
        return float(self.values.max())

    @property
    def without_rounds(self) -> list[int]:
        """Prompts that finished before any round ran (first token was end-of-sequence)."""
        return [int(i) for i in np.flatnonzero(np.isnan(self.per_prompt_sd))]

    @property
    def below_break_even(self) -> list[int]:
        """Indices of prompts whose simulated speedup is under 1."""
        return [int(i) for i in self.prompt_index[self.values < 1.0]]

    def report(self) -> str:
        lines = [f"prompts: {self.prompt_index.size}",
                 f"min SD: {self.min:.4f}", f"max SD: {self.max:.4f}"]
        for lo, hi, pct in zip(self.edges[:-1], self.edges[1:], self.percentages):
            lines.append(f"[{lo:.3f}, {hi:.3f}): {pct:.2f}%")
        slow = self.below_break_even
        if slow:
            lines.append(f"below break-even (SD < 1): {len(slow)} prompt(s): {slow}")
        else:
            lines.append("below break-even (SD < 1): none")
        if self.without_rounds:
            lines.append(f"excluded, no rounds: {self.without_rounds}")
        return "\n".join(lines)


def speedup_distribution(groups, cm: CostModel, num_buckets: int = 10) -> SpeedupHistogram:
    """Histogram of per-prompt simulated speedups over equal-width buckets."""
    if num_buckets < 1:
        raise ValueError("num_buckets must be >= 1")
    sd = np.array([replay_cost(g, cm).speedup for g in groups], dtype=float)
    index = np.flatnonzero(~np.isnan(sd))
    if index.size == 0:
        raise ValueError("no prompt ran a speculative round")
    values = sd[index]
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        edges = np.array([lo, hi])
        counts = np.array([values.size])
    else:
        edges = np.linspace(lo, hi, num_buckets + 1)
        counts, _ = np.histogram(values, bins=edges)
    return SpeedupHistogram(edges, counts, sd, index)

