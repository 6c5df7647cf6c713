"""Train a GATv2 syndrome decoder, attack it with a bit-flip adversary, and harden it."""

__version__ = "0.1.0"
