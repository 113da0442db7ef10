"""Exception taxonomy shared across the pipeline.

Data problems (bad KB files, bad annotations) are distinct from environment
problems (unreachable backends) so the CLI can map them to stable exit codes.
"""


class HattackError(Exception):
    """Base class for all package errors."""


# --- knowledge base ---------------------------------------------------------

class ParseError(HattackError):
    """Input file is not valid JSON / JSONL or misses required schema keys."""


class ValidationError(HattackError):
    """Structurally valid input violates a taxonomy invariant."""


class UnknownTechnique(HattackError):
    """An annotation references a technique id absent from the hierarchy."""


# --- embedder ----------------------------------------------------------------

class EmptyText(HattackError):
    """Text is empty after whitespace trimming."""


class MissingVector(HattackError):
    """File backend has no precomputed vector for the requested id or text."""


class ServiceError(HattackError):
    """Remote embedding service failed (non-2xx, timeout, bad dimension)."""


# --- vector index ------------------------------------------------------------

class DimensionMismatch(HattackError):
    """Vector dimensions disagree."""


class DuplicateId(HattackError):
    """An id occurs more than once where uniqueness is required."""


class PartitionError(HattackError):
    """Partition cells are not a disjoint cover of the indexed ids."""


class NotPartitioned(HattackError):
    """A partition-restricted query hit an unpartitioned index."""


# --- reranker ----------------------------------------------------------------

class EmptyTruth(HattackError):
    """A loss over true labels received an empty truth set."""


class EmptyCandidates(HattackError):
    """An operation requiring candidates received an empty candidate set."""


class NoValidationData(HattackError):
    """Training requires a non-empty validation split."""


class DivergedLoss(HattackError):
    """Training produced a non-finite loss."""


# --- generation ---------------------------------------------------------------

class UnparseableOutput(HattackError):
    """Generated text contains no technique id anywhere."""


class BackendUnavailable(HattackError):
    """Generation backend unreachable or returned a non-2xx status."""


class BackendTimeout(HattackError):
    """Generation backend timed out."""


# --- evaluation ----------------------------------------------------------------

class LengthMismatch(HattackError):
    """Parallel prediction/truth collections differ in length."""
