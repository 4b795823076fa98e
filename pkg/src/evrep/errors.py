"""Exception types shared across the package.

Parsing and windowing errors carry enough context (offsets, line numbers)
to locate the offending input; backend errors distinguish transient
conditions (rate limits, timeouts) from permanent ones.
"""


class EvrepError(Exception):
    """Base class for all errors raised by this package."""


# --- event file parsing ---

class TruncatedRecord(EvrepError):
    """Binary event file length is not a whole number of records."""


class CoordinateOutOfRange(EvrepError):
    """An event lies outside the declared sensor resolution."""


class MalformedRow(EvrepError):
    """A CSV event row could not be parsed."""


class UnsortedTimestamps(EvrepError):
    """Event timestamps decrease and sorting was not requested."""


class InvalidWindow(EvrepError):
    """Time window with t0 > t1 (or t0 >= t1 where a span is required)."""


class ClassTooSmall(EvrepError):
    """A class has too few samples for the requested split."""


class EmptyResolution(EvrepError):
    """Sensor resolution has a zero dimension."""


# --- generator ---

class InvalidConfig(EvrepError):
    """Generator configuration violates its invariants."""


class ShapeMismatch(EvrepError):
    """Array shapes are incompatible with the requested operation."""


class IOFailure(EvrepError):
    """File could not be read or written."""


class ChecksumMismatch(EvrepError):
    """Checkpoint file is corrupt or truncated."""


class ConfigMismatch(EvrepError):
    """Checkpoint was saved with a different architecture."""


# --- losses ---

class InvalidWeights(EvrepError):
    """Loss weights are invalid (negative, or both zero)."""


# --- LLM backends ---

class BackendError(EvrepError):
    """Base class for LLM backend failures."""


class Timeout(BackendError):
    """Backend did not respond within the configured timeout."""


class HTTPError(BackendError):
    """Backend returned a non-success HTTP status."""

    def __init__(self, status: int, message: str = ""):
        super().__init__(message or f"HTTP status {status}")
        self.status = status


class RateLimited(BackendError):
    """Backend kept returning 429 after all retries."""


class ReplayMiss(BackendError):
    """No recorded response for this (prompt, image) pair."""


# --- training / evaluation ---

class MissingRGBPair(EvrepError):
    """A training sample has no paired RGB frame."""


class BackendFailure(EvrepError):
    """Training or evaluation aborted because the backend kept failing."""


class MissingCheckpoint(EvrepError):
    """Generated-representation evaluation requested without a checkpoint."""


class MissingExternalFrames(EvrepError):
    """External-frame evaluation requested without a frame directory."""


class EmptyRecords(EvrepError):
    """Accuracy aggregation over an empty record list."""
