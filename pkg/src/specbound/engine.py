"""Bounded self-speculative decoding over cached hidden states.

Each round drafts tokens with early exits from the model's own shallow layers,
stops at the first of three bounds, and then pushes every in-flight position
through the remaining layers in one layer-major pass:

* depth bound: a drafting attempt reaches ``d_max`` without exiting;
* width bound: ``w_max`` drafts have been produced;
* length limit: the token budget is exhausted or an end-of-sequence draft
  was produced.

Bookkeeping convention. The last committed token is *pending*: its value is
known but its position has not been run through the network. A round starts
by drafting from the pending position ``m``. The attempt at position ``q``
proposes the token for ``q + 1``; verification reads the final logits at
``q`` to check it. When the round ends on the depth bound, the final logits
at the failed position supply one extra token for free. When it ends on a
rejection, the final logits at the rejecting position supply the corrected
token. Either way the extra token becomes the next pending token.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .cache import CacheGapError, HiddenStateCache, KvCache
from .exit_policy import ActConfig, should_exit
from .model import (
    EOS_ID,
    ToyModel,
    exit_logits,
    final_logits,
    full_forward,
    run_advance,
    baseline_decode,
)
from .sampling import DecodeStrategy, Greedy, argmax, distribution, format_strategy, sample


TRACE_SCHEMA = "specbound-trace/1"


class Trigger(str, enum.Enum):
    DEPTH_BOUND = "depth_bound"
    WIDTH_BOUND = "width_bound"
    LENGTH_LIMIT = "length_limit"


@dataclass(frozen=True)
class EngineConfig:
    act: ActConfig = field(default_factory=ActConfig)
    d_max: int = 10
    w_max: int = 8
    strategy: DecodeStrategy = field(default_factory=Greedy)
    # Excludes the free verification token from speedup accounting.
    paper_faithful_bonus: bool = False
    max_new_tokens: int = 64
    rng_seed: int = 0
    # Alignment target for depth-bound rounds: "d_max" or "deepest".
    depth_align: str = "d_max"
    eos_id: int | None = EOS_ID

    def validate(self, num_layers: int) -> None:
        if self.act.num_layers != num_layers:
            raise ValueError(f"act.num_layers={self.act.num_layers} but the model has {num_layers} layers")
        if not 1 <= self.d_max <= num_layers - 1:
            raise ValueError(f"d_max must lie in 1..{num_layers - 1}, got {self.d_max}")
        if self.w_max < 1:
            raise ValueError(f"w_max must be >= 1, got {self.w_max}")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")
        if self.depth_align not in ("d_max", "deepest"):
            raise ValueError(f"depth_align must be 'd_max' or 'deepest', got {self.depth_align!r}")

    def to_dict(self) -> dict:
        return {
            "threshold": self.act.threshold,
            "anneal_alpha": self.act.anneal_alpha,
            "num_layers": self.act.num_layers,
            "d_max": self.d_max,
            "w_max": self.w_max,
            "strategy": format_strategy(self.strategy),
            "paper_faithful_bonus": self.paper_faithful_bonus,
            "max_new_tokens": self.max_new_tokens,
            "seed": self.rng_seed,
            "depth_align": self.depth_align,
            "eos_id": self.eos_id,
        }


@dataclass
class DraftToken:
    position: int
    token_id: int
    exit_layer: int | None
    confidence: float
    draft_distribution: np.ndarray | None = None


@dataclass
class DepthBoundHit:
    position: int  # the position whose attempt ran to d_max without exiting


@dataclass
class RoundTrace:
    drafts: list[DraftToken]
    trigger: Trigger
    align_target_layer: int
    accepted_count: int
    bonus_token: int | None
    layer_units_draft: int     # sequential work of each attempt's own position
    layer_units_verify: int    # (positions x layers) in the joint pass
    layer_units_reuse: int = 0  # earlier positions extended alongside an attempt
    layer_units_align: int = 0  # (positions x layers) added by alignment
    align_layers: int = 0       # distinct layers crossed by alignment
    verify_layers: int = 0      # depth of the joint pass
    num_positions: int = 0      # in-flight positions this round
    committed_tokens: list[int] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def committed(self) -> int:
        return len(self.committed_tokens)

    @property
    def exit_layers(self) -> list[int | None]:
        return [d.exit_layer for d in self.drafts]

    def to_dict(self) -> dict:
        """JSON-ready record; draft distributions are omitted."""
        return {
            "schema": TRACE_SCHEMA,
            "drafts": [{"position": d.position, "token_id": d.token_id, "exit_layer": d.exit_layer,
                        "confidence": d.confidence} for d in self.drafts],
            "trigger": self.trigger.value,
            "align_target_layer": self.align_target_layer,
            "accepted_count": self.accepted_count,
            "bonus_token": self.bonus_token,
            "layer_units_draft": self.layer_units_draft,
            "layer_units_verify": self.layer_units_verify,
            "layer_units_reuse": self.layer_units_reuse,
            "layer_units_align": self.layer_units_align,
            "align_layers": self.align_layers,
            "verify_layers": self.verify_layers,
            "num_positions": self.num_positions,
            "committed_tokens": list(self.committed_tokens),
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "RoundTrace":
        if record.get("schema") != TRACE_SCHEMA:
            raise ValueError(f"trace schema mismatch: expected {TRACE_SCHEMA!r}, got {record.get('schema')!r}")
        try:
            drafts = [DraftToken(d["position"], d["token_id"], d["exit_layer"], d["confidence"])
                      for d in record["drafts"]]
            fields = {k: record[k] for k in (
                "align_target_layer", "accepted_count", "bonus_token", "layer_units_draft",
                "layer_units_verify", "layer_units_reuse", "layer_units_align", "align_layers",
                "verify_layers", "num_positions", "committed_tokens", "wall_time")}
            return cls(drafts=drafts, trigger=Trigger(record["trigger"]), **fields)
        except KeyError as exc:
            raise ValueError(f"trace schema mismatch: missing field {exc.args[0]!r}") from None


@dataclass
class DecodeResult:
    tokens: list[int]
    traces: list[RoundTrace]
    prompt_length: int
    truncated: bool = False  # budget clipped to fit max_context

    @property
    def rounds(self) -> int:
        return len(self.traces)


class Session:
    """One decode over a shared, read-only model.

    ``debug=True`` poisons rolled-back cache rows with NaN and records every
    committed position's per-layer hidden states in ``state_log``.
    """

    def __init__(self, model: ToyModel, cfg: EngineConfig, debug: bool = False):
        cfg.validate(model.num_layers)
        self.model = model
        self.cfg = cfg
        self.debug = debug
        self.kv: KvCache = model.new_kv()
        self.hidden = HiddenStateCache(model.num_layers, cfg.w_max, model.dim)
        self.rng = np.random.default_rng(cfg.rng_seed)
        self.tokens: list[int] = []
        self.prompt_length = 0
        self.anchor: np.ndarray | None = None
        self.budget = 0
        self.truncated = False
        self.finished = False
        self.traces: list[RoundTrace] = []
        self.state_log: dict[int, np.ndarray] = {}
        self._drafts: list[DraftToken] = []
        self._heads = model.probe_heads()
        self._layer_args = (model.g_attn, model.wq, model.wk, model.wv, model.wo,
                            model.g_ffn, model.w1, model.w2)

    # -- setup ---------------------------------------------------------------

    def prefill(self, prompt) -> None:
        """Full-depth pass over the prompt; its last final logits become the anchor."""
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise ValueError("prompt must be non-empty")
        max_ctx = self.model.spec.max_context
        if len(prompt) > max_ctx:
            raise ValueError(f"context overflow: prompt of {len(prompt)} tokens > max_context {max_ctx}")
        states, _ = full_forward(self.model, prompt, kv=self.kv)
        if self.debug:
            for i in range(len(prompt)):
                self.state_log[i] = states[i].copy()
        self.tokens = list(prompt)
        self.prompt_length = len(prompt)
        self.anchor = final_logits(self.model, states[-1, -1])
        room = max_ctx - len(prompt)
        self.budget = min(self.cfg.max_new_tokens, room)
        self.truncated = self.cfg.max_new_tokens > room

    def restore(self, prompt, kv: KvCache, anchor: np.ndarray) -> None:
        """Start from an existing prefill instead of recomputing it."""
        self.tokens = [int(t) for t in prompt]
        self.prompt_length = len(self.tokens)
        room = self.model.spec.max_context - len(self.tokens)
        self.budget = min(self.cfg.max_new_tokens, room)
        self.truncated = self.cfg.max_new_tokens > room
        # Only positions this decode can reach need KV rows.
        self.kv = kv.copy(capacity=len(self.tokens) + self.budget)
        self.anchor = anchor.copy()

    def prefill_pending(self, context) -> None:
        """Prefill all but the last context token and leave that one pending.

        The first round then drafts and verifies the token that follows the
        context, instead of reading it off the prefill anchor.
        """
        context = [int(t) for t in context]
        if not context:
            raise ValueError("context must be non-empty")
        max_ctx = self.model.spec.max_context
        if len(context) > max_ctx:
            raise ValueError(f"context overflow: {len(context)} tokens > max_context {max_ctx}")
        if len(context) > 1:
            states, _ = full_forward(self.model, context[:-1], kv=self.kv)
            if self.debug:
                for i in range(len(context) - 1):
                    self.state_log[i] = states[i].copy()
        self.tokens = context
        self.prompt_length = len(context)
        self.anchor = None
        room = max_ctx - len(context)
        self.budget = min(self.cfg.max_new_tokens, room)
        self.truncated = self.cfg.max_new_tokens > room

    def rewind(self, num_tokens: int) -> None:
        """Drop every token after the first ``num_tokens``; the last kept one becomes pending."""
        if not self.prompt_length <= num_tokens <= len(self.tokens):
            raise ValueError(f"can only rewind to {self.prompt_length}..{len(self.tokens)} tokens")
        del self.tokens[num_tokens:]
        self.kv.truncate(num_tokens - 1, poison=self.debug)
        self.finished = False
        self.traces = []

    def emit_first(self) -> None:
        """Commit the first new token straight from the prefill anchor."""
        if self.budget == 0:
            self.finished = True
            return
        self._commit([self._choose(self.anchor)])

    # -- properties ----------------------------------------------------------

    @property
    def generated(self) -> list[int]:
        return self.tokens[self.prompt_length:]

    @property
    def pending_position(self) -> int:
        return len(self.tokens) - 1

    @property
    def remaining(self) -> int:
        return self.budget - len(self.generated)

    # -- drafting --------------------------------------------------------------

    def draft_next(self) -> DraftToken | DepthBoundHit:
        """Run one drafting attempt from the next in-flight position."""
        if len(self._drafts) >= self.cfg.w_max:
            raise RuntimeError("draft width already at w_max")
        slot = self.hidden.used
        token_in = self.tokens[-1] if slot == 0 else self._drafts[-1].token_id
        self.hidden.open_slot(self.model.embed[token_in])
        position = self.hidden.position(slot)
        act = self.cfg.act
        layer, token, p, reuse = kernels.draft_attempt(
            self.hidden.table, self.hidden.high_water, slot, self.hidden.base, self.cfg.d_max,
            self.model.num_layers, act.anneal_alpha, act.threshold, self._heads,
            self.model.spec.head_gain, *self._layer_args,
            self.kv.keys, self.kv.values, self.kv.lengths)
        self._round_reuse += reuse
        if layer == -2:
            raise CacheGapError(-1, position)
        if layer == -1:
            self._round_draft_units += self.cfg.d_max
            return DepthBoundHit(position)
        self._round_draft_units += layer
        draft_dist = None
        if not isinstance(self.cfg.strategy, Greedy):
            logits = exit_logits(self.model, layer, self.hidden.table[slot, layer])
            draft_dist = distribution(logits, self.cfg.strategy)
            token = sample(draft_dist, self.rng)
        draft = DraftToken(position + 1, int(token), int(layer), float(p), draft_dist)
        self._drafts.append(draft)
        return draft

    def extend_to_layer(self, position: int, target: int) -> int:
        """Compute the missing layers of one in-flight position up to ``target``.

        Every earlier in-flight position must already be at ``target`` or the
        call raises ``CacheGapError``. Returns the number of layers computed.
        """
        slot = position - self.hidden.base
        if not 0 <= slot < self.hidden.used:
            raise ValueError(f"position {position} is not in flight")
        if not 0 <= target <= self.model.num_layers:
            raise ValueError(f"target layer {target} outside 0..{self.model.num_layers}")
        hw = int(self.hidden.high_water[slot])
        if target <= hw:
            return 0
        # Run only this slot: a one-row view of the table and high-water marks.
        return run_advance(self.model, self.hidden.table[slot:slot + 1],
                           self.hidden.high_water[slot:slot + 1], 1, position, target, self.kv)

    def align_block(self, trigger: Trigger) -> int:
        """Bring every in-flight position to a common layer; returns that layer."""
        n = self.hidden.used
        hw = self.hidden.high_water[:n]
        if trigger is Trigger.DEPTH_BOUND and self.cfg.depth_align == "d_max":
            target = self.cfg.d_max
        else:
            target = int(hw.max())
        lagging = hw[hw < target]
        self._round_align_layers = int(target - lagging.min()) if lagging.size else 0
        self._round_align_units = run_advance(self.model, self.hidden.table, self.hidden.high_water,
                                              n, self.hidden.base, target, self.kv)
        return target

    # -- verification ----------------------------------------------------------

    def verify_block(self, trigger: Trigger, align_target: int) -> tuple[int, int | None, list[int]]:
        """Finish all in-flight positions and accept the longest valid draft prefix.

        Returns ``(accepted_count, bonus_token, committed_tokens)``; the bonus
        is the corrected token on a rejection or the free token after a fully
        accepted depth-bound round.
        """
        model, L = self.model, self.model.num_layers
        n = self.hidden.used
        self._round_verify_units = verify_pass(model, self.hidden, n, self.kv)
        self._round_verify_layers = L - align_target
        finals = np.empty((n, model.vocab_size))
        for s in range(n):
            kernels.head_logits(self.hidden.table[s, L], model.lm_head, model.spec.head_gain, finals[s])
        drafts = self._drafts
        accepted = 0
        bonus = None
        greedy = isinstance(self.cfg.strategy, Greedy)
        for i, draft in enumerate(drafts):
            if greedy:
                target_tok = int(np.argmax(finals[i]))
                if draft.token_id == target_tok:
                    accepted += 1
                    continue
                bonus = target_tok
            else:
                if draft.draft_distribution is None:
                    raise ValueError("sampling verification needs the draft distribution")
                q = distribution(finals[i], self.cfg.strategy)
                p = draft.draft_distribution
                x = draft.token_id
                if self.rng.random() < min(1.0, q[x] / p[x]):
                    accepted += 1
                    continue
                residual = np.maximum(q - p, 0.0)
                total = residual.sum()
                bonus = sample(residual / total if total > 0 else q, self.rng)
            break
        if bonus is None and trigger is Trigger.DEPTH_BOUND:
            bonus = self._choose(finals[n - 1])
        # Positions whose input tokens were all correct stay in the cache.
        valid = accepted + 1 if (bonus is not None) else accepted
        committed = [d.token_id for d in drafts[:accepted]]
        if bonus is not None:
            committed.append(bonus)
        keep = self.hidden.base + valid
        if self.debug:
            for s in range(valid):
                self.state_log[self.hidden.base + s] = self.hidden.table[s].copy()
            self.hidden.poison_from(valid)
        self.kv.truncate(keep, poison=self.debug)
        self.anchor = finals[valid - 1]
        return accepted, bonus, committed

    # -- rounds ----------------------------------------------------------------

    def run_round(self) -> RoundTrace:
        if self.finished or self.remaining <= 0:
            raise RuntimeError("nothing left to generate")
        t0 = time.perf_counter()
        self.hidden.reset(self.pending_position)
        self._drafts = []
        self._round_draft_units = 0
        self._round_reuse = 0
        remaining = self.remaining
        eos = self.cfg.eos_id
        while True:
            if len(self._drafts) == self.cfg.w_max:
                trigger = Trigger.WIDTH_BOUND
                break
            if len(self._drafts) == remaining or (
                    self._drafts and eos is not None and self._drafts[-1].token_id == eos):
                trigger = Trigger.LENGTH_LIMIT
                break
            if isinstance(self.draft_next(), DepthBoundHit):
                trigger = Trigger.DEPTH_BOUND
                break
        target = self.align_block(trigger)
        accepted, bonus, committed = self.verify_block(trigger, target)
        self._commit(committed)
        trace = RoundTrace(
            drafts=self._drafts,
            trigger=trigger,
            align_target_layer=target,
            accepted_count=accepted,
            bonus_token=bonus,
            layer_units_draft=self._round_draft_units,
            layer_units_verify=self._round_verify_units,
            layer_units_reuse=self._round_reuse,
            layer_units_align=self._round_align_units,
            align_layers=self._round_align_layers,
            verify_layers=self._round_verify_layers,
            num_positions=self.hidden.used,
            committed_tokens=committed,
            wall_time=time.perf_counter() - t0,
        )
        self.traces.append(trace)
        return trace

    def run(self) -> DecodeResult:
        while not self.finished and self.remaining > 0:
            self.run_round()
        return DecodeResult(self.generated, self.traces, self.prompt_length, self.truncated)

    # -- helpers ---------------------------------------------------------------

    def _choose(self, logits: np.ndarray) -> int:
        if isinstance(self.cfg.strategy, Greedy):
            return argmax(logits)
        return sample(distribution(logits, self.cfg.strategy), self.rng)

    def _commit(self, tokens: list[int]) -> None:
        eos = self.cfg.eos_id
        for tok in tokens:
            self.tokens.append(int(tok))
            if eos is not None and tok == eos:
                self.finished = True
                break
        if self.remaining <= 0:
            self.finished = True


def verify_pass(model: ToyModel, hidden: HiddenStateCache, n: int, kv: KvCache) -> int:
    """Run in-flight slots ``0..n-1`` through every remaining layer, layer-major."""
    return run_advance(model, hidden.table, hidden.high_water, n, hidden.base, model.num_layers, kv)


def prefill(model: ToyModel, prompt, cfg: EngineConfig | None = None, debug: bool = False) -> Session:
    session = Session(model, cfg or EngineConfig(act=ActConfig(num_layers=model.num_layers)), debug)
    session.prefill(prompt)
    return session


def decode(model: ToyModel, prompt, cfg: EngineConfig, debug: bool = False) -> DecodeResult:
    session = prefill(model, prompt, cfg, debug)
    session.emit_first()
    return session.run()


@dataclass
class PromptComparison:
    prompt_index: int
    engine_tokens: list[int]
    baseline_tokens: list[int]
    first_divergence: int | None
    rounds: int
    drafted: int
    accepted: int

    @property
    def compression_rate(self) -> float:
        return self.accepted / self.rounds if self.rounds else 0.0


@dataclass
class EquivalenceReport:
    config: EngineConfig
    prompts: list[PromptComparison]

    @property
    def mismatch_count(self) -> int:
        return sum(p.first_divergence is not None for p in self.prompts)

    @property
    def compression_rate(self) -> float:
        rounds = sum(p.rounds for p in self.prompts)
        return sum(p.accepted for p in self.prompts) / rounds if rounds else 0.0

    @property
    def accept_rate(self) -> float:
        drafted = sum(p.drafted for p in self.prompts)
        return sum(p.accepted for p in self.prompts) / drafted if drafted else 0.0


def first_divergence(a: list[int], b: list[int]) -> int | None:
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    return None if len(a) == len(b) else min(len(a), len(b))


class PrefillCache:
    """Prefill results per prompt, shared by every config decoded on it."""

    def __init__(self, model: ToyModel):
        self.model = model
        self._store: dict[tuple[int, ...], tuple[KvCache, np.ndarray]] = {}

    def session(self, prompt, cfg: EngineConfig, debug: bool = False) -> Session:
        key = tuple(int(t) for t in prompt)
        if key not in self._store:
            s = prefill(self.model, key, replace(cfg, max_new_tokens=0))
            self._store[key] = (s.kv, s.anchor)
        session = Session(self.model, cfg, debug)
        if debug:
            session.prefill(key)
        else:
            kv, anchor = self._store[key]
            session.restore(key, kv, anchor)
        return session


def assert_equivalence(model: ToyModel, prompts, cfg: EngineConfig, baselines=None,
                       prefills: PrefillCache | None = None) -> EquivalenceReport:
    """Decode every prompt with the engine and with full-depth greedy decoding and compare."""
    if not isinstance(cfg.strategy, Greedy):
        raise ValueError("token-level equivalence is only defined for greedy decoding")
    prefills = prefills or PrefillCache(model)
    rows = []
    for i, prompt in enumerate(prompts):
        if baselines is not None:
            ref = list(baselines[i])
        else:
            n = min(cfg.max_new_tokens, model.spec.max_context - len(prompt))
            ref = baseline_decode(model, prompt, n, Greedy(), eos_id=cfg.eos_id).tokens
        session = prefills.session(prompt, cfg)
        session.emit_first()
        result = session.run()
        rows.append(PromptComparison(
            prompt_index=i,
            engine_tokens=result.tokens,
            baseline_tokens=ref,
            first_divergence=first_divergence(result.tokens, ref),
            rounds=result.rounds,
            drafted=sum(len(t.drafts) for t in result.traces),
            accepted=sum(t.accepted_count for t in result.traces),
        ))
    return EquivalenceReport(cfg, rows)


@dataclass
class LayerScan:
    """Per-layer probe of a greedy continuation; arrays are (L, n_positions)."""
    tokens: np.ndarray
    confidence: np.ndarray
    exited: np.ndarray
    exited_before: np.ndarray
    continuation: list[int]

    def rows(self):
        L, n = self.tokens.shape
        for layer in range(1, L + 1):
            for pos in range(n):
                yield (layer, pos, int(self.tokens[layer - 1, pos]),
                       float(self.confidence[layer - 1, pos]), bool(self.exited_before[layer - 1, pos]))


def layer_scan(model: ToyModel, context, n_positions: int, act: ActConfig | None = None) -> LayerScan:
    """Exit-head argmax and annealed confidence at every layer for each generated position.

    ``exited_before`` marks cells below the first layer that met the threshold.
    """
    act = act or ActConfig(num_layers=model.num_layers)
    context = [int(t) for t in context]
    cont = baseline_decode(model, context, n_positions, Greedy(), eos_id=None).tokens
    seq = context + cont
    states, _ = full_forward(model, seq[:len(context) + max(n_positions - 1, 0)])
    L = model.num_layers
    tokens = np.zeros((L, n_positions), dtype=np.int64)
    conf = np.zeros((L, n_positions))
    exited = np.zeros((L, n_positions), dtype=bool)
    for j in range(n_positions):
        h = states[len(context) - 1 + j]
        for layer in range(1, L + 1):
            d = should_exit(exit_logits(model, layer, h[layer]), layer, act)
            tokens[layer - 1, j] = d.token_id
            conf[layer - 1, j] = d.confidence
            exited[layer - 1, j] = d.exited
    before = np.zeros_like(exited)
    before[1:] = np.logical_or.accumulate(exited, axis=0)[:-1]
    return LayerScan(tokens, conf, exited, before, cont)
