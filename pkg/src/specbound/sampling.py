"""Decoding strategies and the distributions they induce over the vocabulary."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Greedy:
    name = "greedy"


@dataclass(frozen=True)
class Temperature:
    t: float = 1.0
    name = "temperature"

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError(f"temperature must be positive, got {self.t}")


@dataclass(frozen=True)
class TopP:
    p: float = 0.9
    t: float = 1.0
    name = "top_p"

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ValueError(f"top-p mass must lie in (0, 1], got {self.p}")
        if not self.t > 0:
            raise ValueError(f"temperature must be positive, got {self.t}")


DecodeStrategy = Greedy | Temperature | TopP


def argmax(logits: np.ndarray) -> int:
    # np.argmax returns the first maximal index: lowest id wins ties.
    return int(np.argmax(logits))


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = (logits - logits.max()) / temperature
    e = np.exp(z)
    return e / e.sum()


def distribution(logits: np.ndarray, strategy: DecodeStrategy) -> np.ndarray:
    """Sampling distribution for a non-greedy strategy."""
    if isinstance(strategy, Temperature):
        return softmax(logits, strategy.t)
    if isinstance(strategy, TopP):
        probs = softmax(logits, strategy.t)
        order = np.argsort(-probs, kind="stable")
        cum = np.cumsum(probs[order])
        # Keep the smallest prefix whose mass reaches p.
        keep = int(np.searchsorted(cum, strategy.p) + 1)
        out = np.zeros_like(probs)
        out[order[:keep]] = probs[order[:keep]]
        return out / out.sum()
    raise TypeError(f"greedy decoding has no sampling distribution: {strategy!r}")


def sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; consumes exactly one uniform from ``rng``."""
    u = rng.random()
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(idx, probs.shape[0] - 1)


def choose(logits: np.ndarray, strategy: DecodeStrategy, rng: np.random.Generator | None) -> int:
    if isinstance(strategy, Greedy):
        return argmax(logits)
    return sample(distribution(logits, strategy), rng)


def parse_strategy(text: str) -> DecodeStrategy:
    """Parse ``greedy``, ``temperature:T`` or ``top_p:P[:T]``."""
    parts = text.strip().lower().split(":")
    kind = parts[0]
    try:
        if kind == "greedy" and len(parts) == 1:
            return Greedy()
        if kind in ("temperature", "temp") and len(parts) == 2:
            return Temperature(float(parts[1]))
        if kind in ("top_p", "topp") and len(parts) in (2, 3):
            t = float(parts[2]) if len(parts) == 3 else 1.0
            return TopP(float(parts[1]), t)
    except ValueError as exc:
        raise ValueError(f"bad strategy {text!r}: {exc}") from None
    raise ValueError(f"unknown strategy {text!r}; use greedy, temperature:T or top_p:P[:T]")


def format_strategy(strategy: DecodeStrategy) -> str:
    if isinstance(strategy, Temperature):
        return f"temperature:{strategy.t:g}"
    if isinstance(strategy, TopP):
        return f"top_p:{strategy.p:g}:{strategy.t:g}"
    return "greedy"
