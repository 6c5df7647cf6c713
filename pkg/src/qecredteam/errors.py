"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class RedTeamError(Exception):
    """Base class; ``kind`` is the machine-parsable tag printed by the CLI."""

    kind = "error"


class DimensionError(RedTeamError, ValueError):
    kind = "dimension"


class NumericError(RedTeamError, ArithmeticError):
    kind = "numeric"


class ContractError(RedTeamError, ValueError):
    kind = "contract"


class ConfigError(RedTeamError, ValueError):
    kind = "config"


class ParseError(RedTeamError, ValueError):
    kind = "parse"

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class BudgetError(RedTeamError, RuntimeError):
    """Raised when an exhaustive enumeration would exceed its configured budget."""

    kind = "budget"


class CheckpointError(RedTeamError, ValueError):
    kind = "checkpoint"
