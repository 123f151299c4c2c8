"""Shared error types."""

from __future__ import annotations


class ConfigurationError(ValueError):
    """Raised when shapes, ranges, or option combinations are invalid."""


class NumericalFailure(RuntimeError):
    """Raised when a forward pass produces non-finite activations."""

    def __init__(self, message, block_index=None):
        super().__init__(message)
        self.block_index = block_index


class TrainingDiverged(RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, message, phase=None, step=None):
        super().__init__(message)
        self.phase = phase
        self.step = step


class DataError(ValueError):
    """Raised for malformed datasets, manifests, or containers."""
