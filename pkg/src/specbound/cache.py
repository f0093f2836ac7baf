"""Key/value cache and the fixed-size hidden-state table used while drafting."""
from __future__ import annotations

import numpy as np


class CacheGapError(RuntimeError):
    """A layer was asked to attend over a position whose KV entry is missing."""

    def __init__(self, layer: int, position: int):
        super().__init__(f"cache gap: no KV entry at layer {layer}, position {position}")
        self.layer = layer
        self.position = position


class KvCache:
    """Per-layer key/value rows over absolute positions.

    Layers are 1-based to match the model; each layer's filled rows form a
    contiguous prefix ``0..length(layer)-1``.
    """

    def __init__(self, num_layers: int, max_context: int, dim: int):
        self.num_layers = num_layers
        self.max_context = max_context
        self.keys = np.zeros((num_layers, max_context, dim))
        self.values = np.zeros((num_layers, max_context, dim))
        self.lengths = np.zeros(num_layers, dtype=np.int64)

    def length(self, layer: int) -> int:
        return int(self.lengths[layer - 1])

    def check_ready(self, layer: int, position: int) -> None:
        """Raise unless rows ``0..position-1`` exist and ``position`` is the next free row."""
        n = self.lengths[layer - 1]
        if n < position:
            raise CacheGapError(layer, int(n))
        if n > position:
            raise ValueError(f"KV row {position} at layer {layer} is already filled")

    def truncate(self, n: int, poison: bool = False) -> None:
        """Drop every row at position >= n. ``poison`` overwrites them with NaN."""
        if poison:
            self.keys[:, n:] = np.nan
            self.values[:, n:] = np.nan
        np.minimum(self.lengths, n, out=self.lengths)

    def copy(self, capacity: int | None = None) -> "KvCache":
        """Independent copy holding ``capacity`` positions (default: the same)."""
        n = int(self.lengths.max()) if self.num_layers else 0
        capacity = self.max_context if capacity is None else capacity
        if capacity < n:
            raise ValueError(f"capacity {capacity} cannot hold {n} filled rows")
        other = KvCache(self.num_layers, capacity, self.keys.shape[2])
        other.keys[:, :n] = self.keys[:, :n]
        other.values[:, :n] = self.values[:, :n]
        other.lengths[:] = self.lengths
        return other


class HiddenStateCache:
    """Hidden states of the in-flight block, indexed by (slot, layer).

    Slot ``s`` holds absolute position ``base + s``. Capacity is fixed at
    ``w_max`` slots by ``L + 1`` layers (layer 0 is the embedding) and the
    table is reused across rounds. ``high_water[s]`` is the deepest layer
    computed for slot ``s``; layers ``0..high_water[s]`` are always present.
    """

    def __init__(self, num_layers: int, w_max: int, dim: int):
        self.num_layers = num_layers
        self.capacity = w_max
        self.table = np.zeros((w_max, num_layers + 1, dim))
        self.high_water = np.full(w_max, -1, dtype=np.int64)
        self.base = 0
        self.used = 0

    def reset(self, base: int) -> None:
        self.base = base
        self.used = 0
        self.high_water[:] = -1

    def open_slot(self, embedding: np.ndarray) -> int:
        """Write layer 0 of the next slot and return its index."""
        if self.used >= self.capacity:
            raise RuntimeError("hidden-state cache capacity exceeded")
        s = self.used
        self.table[s, 0] = embedding
        self.high_water[s] = 0
        self.used += 1
        return s

    def position(self, slot: int) -> int:
        return self.base + slot

    def state(self, slot: int, layer: int) -> np.ndarray:
        if layer > self.high_water[slot] or layer < 0:
            raise KeyError(f"slot {slot} has no state at layer {layer}")
        return self.table[slot, layer]

    def poison_from(self, slot: int) -> None:
        self.table[slot:] = np.nan
        self.high_water[slot:] = -1
