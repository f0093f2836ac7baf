"""Feature-cached training of the intermediate exit heads.

The base model runs once per corpus sequence; every later gradient step only
touches the cached per-layer hidden states and the linear heads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import RMS_EPS
from .model import ToyModel, final_logits, full_forward
from .sampling import Temperature, sample, softmax


@dataclass
class TrainCorpus:
    sequences: list[list[int]]
    labels: list[np.ndarray]           # labels[i][t]: greedy final-layer token after position t
    cached_features: list[np.ndarray]  # (L-1, seq_len, D) per sequence

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def num_positions(self) -> int:
        return sum(len(s) for s in self.sequences)


def build_corpus(model: ToyModel, num_sequences: int, seq_len: int, rng_seed: int = 0) -> TrainCorpus:
    """Sample sequences from the model itself and cache features and labels.

    Each sequence starts from a uniformly random token and continues by
    temperature-1.0 sampling from the full-depth distribution.
    """
    if seq_len < 1 or num_sequences < 1:
        raise ValueError("num_sequences and seq_len must be positive")
    if seq_len > model.spec.max_context:
        raise ValueError(f"context overflow: seq_len {seq_len} > {model.spec.max_context}")
    rng = np.random.default_rng(rng_seed)
    L = model.num_layers
    strategy = Temperature(1.0)
    sequences, labels, features = [], [], []
    for _ in range(num_sequences):
        seq = [int(rng.integers(model.vocab_size))]
        kv = model.new_kv()
        while len(seq) < seq_len:
            states, kv = full_forward(model, seq[-1:], kv=kv, start=len(seq) - 1)
            probs = softmax(final_logits(model, states[0, L]), strategy.t)
            seq.append(sample(probs, rng))
        # One full-depth pass over the finished sequence supplies features and labels.
        states, _ = full_forward(model, seq)
        labels.append(np.array([int(np.argmax(final_logits(model, states[t, L]))) for t in range(seq_len)]))
        features.append(np.ascontiguousarray(states[:, 1:L].transpose(1, 0, 2)))
        sequences.append(seq)
    return TrainCorpus(sequences, labels, features)


def normalized_features(corpus: TrainCorpus, layer: int, gain: float) -> np.ndarray:
    """Stacked ``gain * rmsnorm(h)`` rows for one layer, matching the head kernel."""
    h = np.concatenate([f[layer - 1] for f in corpus.cached_features], axis=0)
    r = gain / np.sqrt(np.mean(h * h, axis=1, keepdims=True) + RMS_EPS)
    return h * r


def head_loss_and_grad(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``softmax(x @ w)`` against hard labels, and its gradient in ``w``."""
    z = x @ w
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = x.shape[0]
    loss = -logp[np.arange(n), y].mean()
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    return float(loss), x.T @ delta / n


OPTIMIZERS = ("gd", "adam")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainResult:
    model: ToyModel
    # (L-1, steps + 1): loss on the batch each step used, then the full-corpus
    # loss after the last step. With full batches every entry is a full loss.
    loss_curves: np.ndarray


def train_exit_heads(model: ToyModel, corpus: TrainCorpus, steps: int, step_size: float,
                     optimizer: str = "gd", batch_size: int | None = None,
                     rng_seed: int = 0) -> TrainResult:
    """Train each exit head independently on the cached features.

    ``optimizer="gd"`` is plain gradient descent. ``"adam"`` rescales each
    coordinate by running moment estimates, which copes far better with the
    badly conditioned features of shallow layers. ``batch_size=None`` uses the
    whole corpus per step; otherwise each head draws its own shuffled
    mini-batches from a stream seeded by ``rng_seed``.

    Base parameters are never touched; a new model carrying the trained heads
    is returned.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if steps < 0 or not step_size > 0:
        raise ValueError("steps must be >= 0 and step_size positive")
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {optimizer!r}")
    if batch_size is not None and batch_size < 1:
        raise ValueError("batch_size must be positive")
    L, D = model.num_layers, model.dim
    for f in corpus.cached_features:
        if f.shape[0] != L - 1 or f.shape[2] != D:
            raise ValueError(f"cached features of shape {f.shape} do not match (L-1={L - 1}, *, D={D})")
    y = np.concatenate(corpus.labels)
    n = y.shape[0]
    heads = model.exit_heads.copy()
    curves = np.empty((L - 1, steps + 1))
    b1, b2 = ADAM_BETAS
    for layer in range(1, L):
        x = normalized_features(corpus, layer, model.spec.head_gain)
        w = heads[layer - 1]
        batches = _batches(n, batch_size, np.random.default_rng([rng_seed, layer]))
        m1 = np.zeros_like(w)
        m2 = np.zeros_like(w)
        for step in range(steps):
            idx = next(batches)
            loss, grad = head_loss_and_grad(w, x[idx], y[idx])
            curves[layer - 1, step] = loss
            if optimizer == "gd":
                w -= step_size * grad
            else:
                m1 = b1 * m1 + (1 - b1) * grad
                m2 = b2 * m2 + (1 - b2) * grad * grad
                m1_hat = m1 / (1 - b1 ** (step + 1))
                m2_hat = m2 / (1 - b2 ** (step + 1))
                w -= step_size * m1_hat / (np.sqrt(m2_hat) + ADAM_EPS)
        curves[layer - 1, steps] = head_loss_and_grad(w, x, y)[0]
    return TrainResult(model.with_exit_heads(heads), curves)


def _batches(n: int, batch_size: int | None, rng: np.random.Generator):
    """Endless index batches: the full range, or shuffled epochs cut into chunks."""
    if batch_size is None or batch_size >= n:
        full = np.arange(n)
        while True:
            yield full
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size]


@dataclass(frozen=True)
class TrainingRecipe:
    """Corpus and optimizer settings that define the default trained model."""
    num_sequences: int = 128
    seq_len: int = 64
    corpus_seed: int = 1
    steps: int = 320
    step_size: float = 0.01
    optimizer: str = "adam"
    batch_size: int | None = 256
    seed: int = 0


def build_trained_model(spec=None, recipe: TrainingRecipe = TrainingRecipe()):
    """Build a model, sample its corpus and train the exit heads; returns (model, TrainResult)."""
    from .model import ToyModelSpec, build_model

    model = build_model(spec or ToyModelSpec())
    corpus = build_corpus(model, recipe.num_sequences, recipe.seq_len, recipe.corpus_seed)
    result = train_exit_heads(model, corpus, recipe.steps, recipe.step_size, recipe.optimizer,
                              recipe.batch_size, recipe.seed)
    return result.model, result
