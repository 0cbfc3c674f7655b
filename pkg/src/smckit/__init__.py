"""Semantic model components: split, expand, transmit and integrate small networks."""

from smckit.errors import (
    BaseModelMismatch,
    CorruptPackage,
    DegenerateRepresentation,
    DimensionMismatch,
    InvalidInput,
    NotAvailable,
    NotFound,
    NumericalError,
    ProtocolError,
    SmcError,
    TransportError,
    UnknownFormat,
    ZeroSignalPower,
)

__version__ = "0.1.0"

__all__ = [
    "BaseModelMismatch",
    "CorruptPackage",
    "DegenerateRepresentation",
    "DimensionMismatch",
    "InvalidInput",
    "NotAvailable",
    "NotFound",
    "NumericalError",
    "ProtocolError",
    "SmcError",
    "TransportError",
    "UnknownFormat",
    "ZeroSignalPower",
]
