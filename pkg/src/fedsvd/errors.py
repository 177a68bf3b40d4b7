"""Exception hierarchy shared by every layer of the package."""


class FedSvdError(Exception):
    """Base class for all errors raised by fedsvd."""


class DimensionMismatch(FedSvdError, ValueError):
    pass


class RankDeficient(FedSvdError, ArithmeticError):
    """A Gram-Schmidt pivot collapsed; the caller should resample."""


class NoConvergence(FedSvdError, ArithmeticError):
    pass


class SingularBlock(FedSvdError, ArithmeticError):
    pass


class WidthMismatch(FedSvdError, ValueError):
    pass


class BudgetTooSmall(FedSvdError, ValueError):
    pass


class OverflowRisk(FedSvdError, ValueError):
    """An entry is too large for the fixed-point codec."""


class MissingParty(FedSvdError):
    pass


class ConfigError(FedSvdError, ValueError):
    pass


class MalformedFrame(FedSvdError, ValueError):
    pass


class TransportTimeout(FedSvdError, TimeoutError):
    pass


class Disconnected(FedSvdError, ConnectionError):
    pass


class ProtocolAborted(FedSvdError):
    """Raised at a role that received an Abort frame."""


class CorruptHeader(FedSvdError, ValueError):
    pass


class TruncatedFile(FedSvdError, ValueError):
    pass


class ZeroVariance(FedSvdError, ValueError):
    pass


class RaggedRows(FedSvdError, ValueError):
    pass


class ParseError(FedSvdError, ValueError):
    pass
