"""Early-exit self-speculative decoding over a deterministic toy transformer."""

__version__ = "0.1.0"
