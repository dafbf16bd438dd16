"""Embedded in-memory transaction engine with group locking for hotspot rows."""

from .core import (
    AbortCause,
    ConfigError,
    EngineClosed,
    EngineConfig,
    EngineError,
    HotStatus,
    OrderingViolation,
    Protocol,
    RowId,
    RowNotFound,
    TxnAborted,
    TxnDescriptor,
    TxnState,
)
from .engine import Engine, make_rows, row_of

__all__ = [
    "AbortCause", "ConfigError", "EngineClosed", "EngineConfig", "EngineError", "HotStatus",
    "OrderingViolation", "Protocol", "RowId", "RowNotFound", "TxnAborted", "TxnDescriptor",
    "TxnState", "Engine", "make_rows", "row_of",
]
