"""Annealed confidence threshold for early exit.

A layer's head logits are divided by a temperature that starts at
``1 + anneal_alpha`` just after the embedding and cools linearly to exactly 1
at the last layer. The draft exits at the first layer whose top-1 probability
under that temperature reaches ``threshold``. Raising the temperature never
changes which token is on top; it only makes shallow layers less confident.

``threshold`` is the same quantity some write as tau and others as gamma.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class ActConfig:
    anneal_alpha: float = 0.2
    threshold: float = 0.55
    num_layers: int = 12

    def __post_init__(self):
        if not self.anneal_alpha >= 0 or not math.isfinite(self.anneal_alpha):
            raise ValueError(f"anneal_alpha must be finite and >= 0, got {self.anneal_alpha}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be positive, got {self.num_layers}")


@dataclass(frozen=True)
class ExitDecision:
    exited: bool
    token_id: int
    confidence: float
    layer: int
    temperature: float


def anneal_temperature(layer: int, num_layers: int, alpha: float) -> float:
    """1 + alpha * (1 - layer / num_layers); equals 1.0 exactly at the last layer."""
    if not 1 <= layer <= num_layers:
        raise ValueError(f"layer {layer} outside 1..{num_layers}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    # Same expression as the draft kernel so both paths agree bit for bit.
    return 1.0 + alpha * (1.0 - layer / num_layers)


def top1_confidence(logits, temperature: float = 1.0) -> tuple[int, float]:
    """Top-1 token (lowest id on ties) and its probability under ``softmax(logits / T)``."""
    z = np.ascontiguousarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("logits must be a non-empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if not temperature >= 1.0:
        raise ValueError(f"temperature must be >= 1, got {temperature}")
    token, p = kernels.top1(z, float(temperature))
    return int(token), float(p)


def should_exit(logits, layer: int, cfg: ActConfig) -> ExitDecision:
    t = anneal_temperature(layer, cfg.num_layers, cfg.anneal_alpha)
    token, p = top1_confidence(logits, t)
    return ExitDecision(exited=p >= cfg.threshold, token_id=token, confidence=p, layer=layer,
                        temperature=t)
