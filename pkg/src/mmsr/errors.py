"""Exception types shared across the package."""


class MmsrError(Exception):
    """Base class for all package-specific errors."""


class OutOfRange(MmsrError):
    """Constant value outside the representable mantissa/exponent band."""


class UnencodableConstant(MmsrError):
    """Expression contains a literal that has no constant-code form."""


class LengthExceeded(MmsrError):
    """Token sequence does not fit in the configured maximum length."""


class MalformedSequence(MmsrError):
    """Token sequence is not a valid preorder serialization."""


class StrayMantissa(MmsrError):
    """Nonzero mantissa at an index whose symbol is not a placeholder."""


class DomainError(MmsrError):
    """Evaluation hit a domain violation where validity was required."""


class ShapeMismatch(MmsrError):
    """Tensor operands have incompatible shapes."""


class NonFiniteValue(MmsrError):
    """A forward tensor op produced NaN or infinity."""


class NotScalar(MmsrError):
    """Backward pass requested from a non-scalar tensor."""


class EmptyBatch(MmsrError):
    """Batched loss invoked with zero examples."""


class NonFiniteLoss(MmsrError):
    """Training loss became non-finite; carries the offending batch index."""

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


class DegenerateTarget(MmsrError):
    """Target vector has zero variance, so R^2 is undefined."""


class NoValidSequence(MmsrError):
    """Every decoded beam failed preorder validation."""


class Unsatisfiable(MmsrError):
    """Corpus generation cannot reach the requested count within budget."""


class CorpusFormatError(MmsrError):
    """Corpus file is truncated or does not match the expected layout."""


class CheckpointError(MmsrError):
    """Checkpoint file is malformed or its config does not match."""


class SuiteFormatError(MmsrError):
    """Benchmark suite file is malformed or cannot be sampled."""
