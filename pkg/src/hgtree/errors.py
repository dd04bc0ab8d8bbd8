"""Exception hierarchy.

Every error family maps to a distinct CLI exit code (see ``cli.EXIT_CODES``).
"""

from __future__ import annotations


class HGTreeError(Exception):
    exit_code = 1


class InvalidParamsError(HGTreeError, ValueError):
    exit_code = 2


class NotATreeError(HGTreeError, ValueError):
    exit_code = 3

    def __init__(self, message: str, branches=()):
        super().__init__(f"{message} (branches: {list(branches)})")
        self.branches = list(branches)


class DegenerateGeometryError(HGTreeError, ValueError):
    exit_code = 3


class CapacityError(HGTreeError, ValueError):
    exit_code = 4

    def __init__(self, message: str, stage: int | None = None):
        super().__init__(message)
        self.stage = stage


class EmptyGenerationError(HGTreeError, ValueError):
    exit_code = 5


class MalformedGrowthError(HGTreeError, ValueError):
    exit_code = 5

    def __init__(self, message: str, recovered: int):
        super().__init__(message)
        self.recovered = recovered


class ShapeError(HGTreeError, ValueError):
    exit_code = 6


class GradientError(HGTreeError, RuntimeError):
    """Backward misuse: non-scalar root or repeated backward over a freed tape."""

    exit_code = 6


class NonFiniteError(HGTreeError, FloatingPointError):
    exit_code = 7


class InvalidScheduleError(HGTreeError, ValueError):
    exit_code = 2


class EmptyLossError(HGTreeError, ValueError):
    exit_code = 7


class InternalStateError(HGTreeError, RuntimeError):
    exit_code = 8


class UsageError(HGTreeError):
    exit_code = 64
