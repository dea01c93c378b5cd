"""Exception hierarchy shared by every charseq module."""


class CharseqError(Exception):
    """Base class for all errors raised by charseq."""


class UsageError(CharseqError, ValueError):
    """Invalid arguments or configuration supplied by the caller."""


class DimensionError(UsageError):
    """Tensor shapes do not fit the requested operation."""


class NumericError(CharseqError, ArithmeticError):
    """An operation produced NaN or Inf."""


class DataError(CharseqError, ValueError):
    """Malformed corpus, vocabulary or checkpoint data."""


class TrainingDiverged(CharseqError, RuntimeError):
    """Loss or gradients became non-finite during training."""
