"""Subprocess test runner speaking a JSON request/response protocol."""

from .runner import ProtocolError, execute, main, values_equal

__all__ = ["ProtocolError", "execute", "main", "values_equal"]
__version__ = "0.1.0"
