"""Deterministic toy layered transformer with per-layer exit heads.

Parameters are drawn from one PCG64 stream seeded by ``ToyModelSpec.seed`` in
this order, each tensor filled row-major:

    embed (V, D)
    for layer 1..L: g_attn (D), wq, wk, wv, wo (D, D), g_ffn (D), w1 (D, 2D), w2 (2D, D)
    lm_head (D, V)
    for layer 1..L-1: exit head (D, V)

Weights are uniform in [-s, s] with s = D ** -0.5; normalization scales are
1 + uniform(-s, s).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .cache import CacheGapError, KvCache
from .sampling import DecodeStrategy, Greedy, choose

EOS_ID = 1
FFN_EXPANSION = 2
HEAD_MODES = ("trained", "oracle")


@dataclass(frozen=True)
class ToyModelSpec:
    num_layers: int = 12
    hidden_dim: int = 32
    vocab_size: int = 64
    max_context: int = 256
    seed: int = 0
    # Shared logit multiplier for every head; sharpens the otherwise flat
    # output of a randomly initialized network.
    head_gain: float = 6.0
    # Layer l's residual update is scaled by residual_scale * residual_decay**(l-1):
    # early layers move the stream a lot, late layers refine it, so exit
    # heads become reliable somewhere in the middle of the stack.
    residual_scale: float = 2.0
    residual_decay: float = 0.7

    def validate(self) -> None:
        if self.num_layers < 2:
            raise ValueError(f"num_layers must be >= 2, got {self.num_layers}")
        if self.hidden_dim < 2:
            raise ValueError(f"hidden_dim must be >= 2, got {self.hidden_dim}")
        if self.vocab_size < 4:
            raise ValueError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.max_context < 1:
            raise ValueError(f"max_context must be positive, got {self.max_context}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if not self.head_gain > 0:
            raise ValueError("head_gain must be positive")
        if not self.residual_scale > 0:
            raise ValueError("residual_scale must be positive")
        if not 0 < self.residual_decay <= 1:
            raise ValueError("residual_decay must lie in (0, 1]")


@dataclass
class ToyModel:
    spec: ToyModelSpec
    embed: np.ndarray
    g_attn: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    g_ffn: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    lm_head: np.ndarray
    exit_heads: np.ndarray
    head_mode: str = field(default="trained")

    BASE_FIELDS = ("embed", "g_attn", "wq", "wk", "wv", "wo", "g_ffn", "w1", "w2", "lm_head")

    @property
    def num_layers(self) -> int:
        return self.spec.num_layers

    @property
    def dim(self) -> int:
        return self.spec.hidden_dim

    @property
    def vocab_size(self) -> int:
        return self.spec.vocab_size

    def base_parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.BASE_FIELDS}

    def tensors(self) -> dict[str, np.ndarray]:
        out = self.base_parameters()
        out["exit_heads"] = self.exit_heads
        return out

    def with_exit_heads(self, heads: np.ndarray) -> "ToyModel":
        if heads.shape != self.exit_heads.shape:
            raise ValueError(f"exit head shape {heads.shape} != {self.exit_heads.shape}")
        return replace(self, exit_heads=np.ascontiguousarray(heads, dtype=np.float64))

    def with_head_mode(self, mode: str) -> "ToyModel":
        if mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {mode!r}")
        return replace(self, head_mode=mode)

    def new_kv(self) -> KvCache:
        return KvCache(self.num_layers, self.spec.max_context, self.dim)

    def probe_heads(self) -> np.ndarray:
        """(L, D, V) stack of the head used at each layer under the current head mode."""
        cached = self.__dict__.get("_probe_heads")
        if cached is None:
            if self.head_mode == "oracle":
                cached = np.repeat(self.lm_head[None], self.num_layers, axis=0)
            else:
                cached = np.concatenate([self.exit_heads, self.lm_head[None]], axis=0)
            self.__dict__["_probe_heads"] = cached
        return cached


def build_model(spec: ToyModelSpec) -> ToyModel:
    spec.validate()
    L, D, V = spec.num_layers, spec.hidden_dim, spec.vocab_size
    H = FFN_EXPANSION * D
    s = D**-0.5
    rng = np.random.Generator(np.random.PCG64(spec.seed))

    def u(*shape):
        return rng.uniform(-s, s, size=shape)

    embed = u(V, D)
    layer_shapes = {
        "g_attn": (D,), "wq": (D, D), "wk": (D, D), "wv": (D, D), "wo": (D, D),
        "g_ffn": (D,), "w1": (D, H), "w2": (H, D),
    }
    stacks = {name: np.empty((L, *shape)) for name, shape in layer_shapes.items()}
    for layer in range(L):
        for name, shape in layer_shapes.items():
            block = u(*shape)
            if name.startswith("g_"):
                block = 1.0 + block
            stacks[name][layer] = block
    # The residual scale folds into the output projections of both sublayers.
    scales = spec.residual_scale * spec.residual_decay ** np.arange(L)
    stacks["wo"] *= scales[:, None, None]
    stacks["w2"] *= scales[:, None, None]
    lm_head = u(D, V)
    exit_heads = np.empty((L - 1, D, V))
    for layer in range(L - 1):
        exit_heads[layer] = u(D, V)
    return ToyModel(spec=spec, embed=embed, lm_head=lm_head, exit_heads=exit_heads, **stacks)


def embedding(model: ToyModel, token: int) -> np.ndarray:
    if not 0 <= token < model.vocab_size:
        raise ValueError(f"token id {token} outside vocabulary of size {model.vocab_size}")
    return model.embed[token].copy()


def _layer_args(model: ToyModel):
    return (model.g_attn, model.wq, model.wk, model.wv, model.wo, model.g_ffn, model.w1, model.w2)


def run_advance(model: ToyModel, states: np.ndarray, high_water: np.ndarray, n: int, pos0: int,
                target: int, kv: KvCache) -> int:
    """Extend ``n`` stacked positions to ``target`` layer-major; returns layer-units computed."""
    units = kernels.advance(states, high_water, n, pos0, target, *_layer_args(model),
                            kv.keys, kv.values, kv.lengths)
    if units < 0:
        code = -units - 1
        raise CacheGapError(code // 1048576, code % 1048576)
    return units


def forward_layer(model: ToyModel, layer: int, position: int, hidden_in: np.ndarray,
                  kv: KvCache) -> np.ndarray:
    """Layer-``layer`` state of ``position`` from its layer-(layer-1) state.

    Writes the position's key/value at that layer. Raises ``CacheGapError`` if
    an earlier position has no KV entry at this layer.
    """
    if not 1 <= layer <= model.num_layers:
        raise ValueError(f"layer {layer} outside 1..{model.num_layers}")
    if not 0 <= position < model.spec.max_context:
        raise ValueError(f"position {position} outside context of {model.spec.max_context}")
    if hidden_in.shape != (model.dim,):
        raise ValueError(f"hidden state shape {hidden_in.shape} != ({model.dim},)")
    kv.check_ready(layer, position)
    states = np.zeros((1, model.num_layers + 1, model.dim))
    states[0, layer - 1] = hidden_in
    run_advance(model, states, np.array([layer - 1]), 1, position, layer, kv)
    return states[0, layer]


def exit_logits(model: ToyModel, layer: int, hidden: np.ndarray) -> np.ndarray:
    """Unscaled logits of the head attached to ``layer`` (layer L is the LM head)."""
    L = model.num_layers
    if not 1 <= layer <= L:
        raise ValueError(f"exit layer {layer} outside 1..{L}")
    w = model.lm_head if layer == L or model.head_mode == "oracle" else model.exit_heads[layer - 1]
    out = np.empty(model.vocab_size)
    kernels.head_logits(hidden, w, model.spec.head_gain, out)
    return out


def final_logits(model: ToyModel, hidden_last: np.ndarray) -> np.ndarray:
    if hidden_last.shape != (model.dim,):
        raise ValueError(f"hidden state shape {hidden_last.shape} != ({model.dim},)")
    out = np.empty(model.vocab_size)
    kernels.head_logits(hidden_last, model.lm_head, model.spec.head_gain, out)
    return out


def full_forward(model: ToyModel, tokens, kv: KvCache | None = None, start: int = 0):
    """Contiguous layer-major forward of ``tokens`` placed at ``start, start+1, ...``.

    Returns ``(states, kv)`` where ``states[i, l]`` is the layer-``l`` state of
    the i-th token (layer 0 is the embedding). ``kv`` must already hold rows
    ``0..start-1`` at every layer.
    """
    tokens = list(tokens)
    if kv is None:
        kv = model.new_kv()
    n = len(tokens)
    if start + n > model.spec.max_context:
        raise ValueError(f"{start + n} positions exceed max_context {model.spec.max_context}")
    states = np.zeros((n, model.num_layers + 1, model.dim))
    for i, tok in enumerate(tokens):
        states[i, 0] = embedding(model, tok)
    run_advance(model, states, np.zeros(n, dtype=np.int64), n, start, model.num_layers, kv)
    return states, kv


@dataclass
class BaselineResult:
    tokens: list[int]
    layers_per_token: list[int]


def baseline_decode(model: ToyModel, prompt, n: int, strategy: DecodeStrategy = Greedy(),
                    rng_seed: int | None = 0, eos_id: int | None = EOS_ID) -> BaselineResult:
    """Full-depth autoregressive decoding of ``n`` new tokens.

    Stops early after committing ``eos_id`` (pass ``None`` to disable).
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if n < 0:
        raise ValueError("n must be nonnegative")
    if len(prompt) + n > model.spec.max_context:
        raise ValueError(
            f"context overflow: prompt {len(prompt)} + {n} new tokens > {model.spec.max_context}")
    out: list[int] = []
    if n == 0:
        return BaselineResult(out, [])
    rng = np.random.default_rng(rng_seed)
    states, kv = full_forward(model, prompt)
    logits = final_logits(model, states[-1, -1])
    pos = len(prompt)
    step = np.zeros((1, model.num_layers + 1, model.dim))
    hw = np.zeros(1, dtype=np.int64)
    while True:
        tok = choose(logits, strategy, rng)
        out.append(tok)
        if len(out) == n or tok == eos_id:
            break
        step[0, 0] = model.embed[tok]
        hw[0] = 0
        run_advance(model, step, hw, 1, pos, model.num_layers, kv)
        logits = final_logits(model, step[0, -1])
        pos += 1
    return BaselineResult(out, [model.num_layers] * len(out))
