"""Exact machine unlearning via sharded, sliced, checkpointed training."""

__version__ = "0.1.0"
