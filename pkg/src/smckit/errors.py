"""Exception hierarchy shared by every module."""


class SmcError(Exception):
    """Base class for all toolkit errors."""


class InvalidInput(SmcError, ValueError):
    pass


class DimensionMismatch(SmcError, ValueError):
    pass


class NumericalError(SmcError, ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class NotFound(SmcError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class DegenerateRepresentation(SmcError, ValueError):
    pass


class BaseModelMismatch(SmcError):
    pass


class ZeroSignalPower(SmcError, ValueError):
    pass


class UnknownFormat(SmcError):
    pass


class CorruptPackage(SmcError):
    pass


class NotAvailable(SmcError):
    pass


class TransportError(SmcError, ConnectionError):
    pass


class ProtocolError(SmcError):
    pass
