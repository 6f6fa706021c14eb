"""Define the exception and warning classes raised by the measurement engine."""

from typing import Any, Mapping, Optional


class MeasureError(Exception):
    """Base class for every hard failure in this package."""

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.details = dict(details)

    def to_json(self) -> Mapping[str, Any]:
        """Machine-readable form written to stderr by the command line."""
        result = {"error": type(self).__name__, "message": str(self)}
        if self.details:
            result["details"] = {key: str(value) for key, value in self.details.items()}
        return result


class PreconditionError(MeasureError, ValueError):
    """An operation was called with arguments outside its contract."""


# Instrument and file loading.
class SchemaError(MeasureError):
    """An input file does not match its schema."""


class DuplicateId(MeasureError):
    """An identifier that must be unique appears more than once."""


class UnknownItem(MeasureError):
    """A response column references an item absent from the instrument."""


# Harmonization.
class MissingRule(MeasureError):
    """A harmonized item has no rule."""


class CodeTableGap(MeasureError):
    """A categorical or ordinal token has no numeric code."""


class ShapeMismatch(MeasureError):
    """A fitted transform does not match the matrix it is applied to."""


class LeakageError(MeasureError):
    """Held-out rows reached a computation that must only see training rows."""


# Taxonomy and mapping.
class CrossAnchorMerge(MeasureError):
    """Consolidation tried to merge subdimensions under different anchors."""


class NotALeaf(MeasureError):
    """A split targeted a subdimension that cannot be split."""


class DuplicateChildId(MeasureError):
    """A split introduced an id that already exists."""


class UnknownSubdimension(MeasureError):
    """A reference names a subdimension the taxonomy does not define."""


class MissingCoverage(MeasureError):
    """A mapped item has no coverage weight."""


class StaleMapping(MeasureError):
    """The mapping references items the harmonized matrix does not hold."""


# Models and metrics.
class SingleClassTrain(MeasureError):
    """Binary training targets contain a single class."""


class EmptyInput(MeasureError):
    """A metric was asked to summarize zero rows."""


# Cross-validation and refinement.
class TooFewRows(MeasureError):
    """There are not enough rows for the requested fold geometry."""


class StaleVersion(MeasureError):
    """Frozen artifacts carry inconsistent version tags."""


class InconsistentRound(MeasureError):
    """Decision inputs come from different refinement rounds."""


class NeighborhoodViolation(MeasureError):
    """A reallocation touches an item outside the target neighborhood."""


class AnchorViolation(MeasureError):
    """An edit tried to modify anchored measurement."""


# Proposal engine.
class ProposerFailure(MeasureError):
    """The proposer could not produce a valid proposal."""


class MissingSlot(MeasureError):
    """A prompt template slot has no value in the context."""


class OutcomeLeak(PreconditionError):
    """Outcome data was about to enter a proposal request."""


class UnparseableResponse(MeasureError):
    """No valid JSON payload could be extracted from a response."""

    def __init__(self, message: str, raw_response: str = "", validation_error: Optional[Exception] = None):
        super().__init__(message)
        self.raw_response = raw_response
        self.validation_error = validation_error


class ConstraintViolation(MeasureError):
    """A proposal or edit breaks the simplex, sparsity, or band constraints."""


class NetworkError(MeasureError):
    """The proposer endpoint could not be reached or refused the request."""


class RateLimited(NetworkError):
    """The proposer endpoint asked us to slow down."""


class MaxRetries(NetworkError):
    """Transient failures persisted beyond the retry cap."""


class MeasureWarning(UserWarning):
    """Base class for non-fatal conditions that are reported, not raised."""


class NonConvergence(MeasureWarning):
    """A model stopped at its iteration cap; the last iterate is used."""


class ZeroVarianceTarget(MeasureWarning):
    """R-squared is undefined because the targets are constant."""


class UndefinedMetric(MeasureWarning):
    """A metric is undefined on the given fold (for example one class only)."""
