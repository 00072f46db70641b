"""Exception types raised by qttfilter."""


class QttFilterError(Exception):
    """Base class for library errors."""


class ShapeMismatchError(QttFilterError, ValueError):
    """Operands have incompatible mode sizes or ranks."""


class MaterializationError(QttFilterError, MemoryError):
    """A dense expansion would exceed the configured size limit."""


class RankCapExceeded(QttFilterError):
    """TT-rounding hit the hard rank cap where that is not allowed."""


class NumericalInstability(QttFilterError):
    """A time-stepping scheme blew up or produced non-finite values."""


class ZeroMassError(QttFilterError):
    """A density has (numerically) zero total mass."""
