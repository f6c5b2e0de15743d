"""Exception hierarchy shared by all forkseq modules."""


class ForkseqError(Exception):
    """Base class for every error raised by this package."""


class FormatError(ForkseqError):
    """Input file is missing a required column or has a malformed header."""


class ParseError(ForkseqError):
    """A field could not be parsed into the expected type."""


class DuplicateError(ForkseqError):
    """The same (unique_id, ds) pair appears more than once."""


class SeriesTooShort(ForkseqError):
    """Series cannot accommodate a train/validation/test split."""


class ShapeError(ForkseqError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(ForkseqError):
    """A caller violated a documented precondition."""


class EmptyLossError(ForkseqError):
    """Loss mask selects no terms."""


class SamplerError(ForkseqError):
    """No valid forecast creation date can be sampled."""


class DivergenceError(ForkseqError):
    """Training produced a non-finite loss.

    The partial trajectory is attached as ``trajectory``.
    """

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class UndefinedMetricError(ForkseqError):
    """Metric has no valid terms or a zero normaliser."""


class DomainError(ForkseqError, ValueError):
    """Argument outside the mathematical domain of the function."""


class MissingArtifactError(ForkseqError):
    """A checkpoint or run directory the command depends on does not exist."""
