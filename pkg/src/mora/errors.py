"""Exception hierarchy for the mora library.

Every error raised intentionally by this package derives from MoraError, so
callers (and the CLI) can separate invalid-input conditions from genuine bugs.
"""


class MoraError(Exception):
    """Base class for all mora-specific errors."""


# --- dataset ingestion / windowing -----------------------------------------

class MissingColumnError(MoraError):
    """A required column is absent from the CSV header."""


class NonMonotonicTimestampsError(MoraError):
    """Timestamps violate the monotonicity required by the schema."""


class EmptyFileError(MoraError):
    """The input file contains no data rows."""


class OutputTooShortError(MoraError):
    """Resampling would produce fewer than 2 samples."""


class WindowLongerThanSeriesError(MoraError):
    """Requested window length exceeds the series length."""


class ClassAbsentError(MoraError):
    """A catalog class has no windows to sample from."""


class InvalidSpecError(MoraError):
    """Synthetic-data specification violates its invariants."""


# --- features / shapes ------------------------------------------------------

class EmptySetError(MoraError):
    """An operation requiring at least one sample received none."""


class DimMismatchError(MoraError):
    """Vector or matrix dimensions do not agree."""


class LengthMismatchError(MoraError):
    """Sequences that must have equal length do not."""


# --- encoders ----------------------------------------------------------------

class CountMismatchError(MoraError):
    """External embedding row count differs from the dataset size."""


class DimInconsistentError(MoraError):
    """Rows of an embedding or label table file disagree in dimension
    or contain non-finite values."""


class TooFewSamplesError(MoraError):
    """Not enough samples to fit the requested model."""


class EmptyTextError(MoraError):
    """Text to embed contains no tokens."""


class UnknownLabelError(MoraError):
    """Label not present in the embedding table and fallback is disabled."""


# --- retrieval store ---------------------------------------------------------

class EmptyDatasetError(MoraError):
    """Dataset has no windows."""


class UnlabeledWindowError(MoraError):
    """An operation requires labels but found an unlabeled window."""


class IndexMissingError(MoraError):
    """Approximate search requested but no index was built."""


class EmptySeriesError(MoraError):
    """A similarity metric received an empty series."""


class BadMagicError(MoraError):
    """Persisted file does not start with the expected magic bytes."""


class VersionUnsupportedError(MoraError):
    """Persisted file has an unsupported format version."""


class ChecksumMismatchError(MoraError):
    """Persisted file failed its integrity check (corrupt or truncated)."""


# --- fusion ------------------------------------------------------------------

class NoNeighborsError(MoraError):
    """Retrieval returned no neighbors to fuse."""


class RowMissingError(MoraError):
    """External probability row is missing, out of range, or unusable."""


class NotFittedError(MoraError):
    """Model queried before being fitted."""


class AlphaOutOfRangeError(MoraError):
    """Fusion ratio outside [0, 1]."""


# --- gate training -----------------------------------------------------------

class EmptyBatchError(MoraError):
    """Training batch contains no instances."""


# --- evaluation harness -------------------------------------------------------

class AllZeroDifferencesError(MoraError):
    """All paired differences are zero; the signed-rank test is undefined."""


class TooFewPairsError(MoraError):
    """Fewer than 5 non-zero paired differences."""


class NoQueriesError(MoraError):
    """Benchmark invoked without queries."""
