"""
Exception hierarchy for the quantization pipeline.

Library code raises these; only the CLI entry point turns them into exit codes.
"""
from __future__ import annotations

from typing import Iterable, List, Tuple

EXIT_OK = 0
EXIT_IO = 2
EXIT_COVERAGE = 3
EXIT_CONFIG = 4


class TrdqError(RuntimeError):
    exit_code = EXIT_CONFIG


class ShapeError(TrdqError):
    pass


class DomainError(TrdqError):
    pass


class FormatError(TrdqError):
    exit_code = EXIT_COVERAGE


class CoverageError(TrdqError):
    """Calibration or analysis input does not cover every required key."""

    exit_code = EXIT_COVERAGE

    def __init__(self, message: str, missing: Iterable[Tuple[int, ...]] = ()) -> None:
        self.missing: List[Tuple[int, ...]] = sorted(missing)
        if self.missing:
            shown = ", ".join(str(key) for key in self.missing[:20])
            more = f" (+{len(self.missing) - 20} more)" if len(self.missing) > 20 else ""
            message = f"{message}: missing {shown}{more}"
        super().__init__(message)
