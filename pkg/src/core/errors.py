# src/core/errors.py

from __future__ import annotations

from typing import Optional


class StereoError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(StereoError, ValueError):
    """Tensors with incompatible or invalid shapes."""


class ConfigError(StereoError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class PfmParseError(StereoError, ValueError):
    """Malformed PFM file. `offset` is the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(StereoError, ValueError):
    """Checkpoint file that does not follow the documented layout."""


class NumericHealthError(StereoError, RuntimeError):
    """A value went non-finite (NaN/Inf) inside the model or the loss."""

    def __init__(
        self,
        message: str,
        iteration: Optional[int] = None,
        term: Optional[str] = None,
    ):
        parts = [message]
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        if term is not None:
            parts.append(f"term={term}")
        super().__init__(" · ".join(parts))
        self.iteration = iteration
        self.term = term
