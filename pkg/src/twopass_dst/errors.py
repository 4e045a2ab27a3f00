"""Exception types shared across the package.

Two broad families matter to callers: validation problems (bad config, bad
input files, missing stage outputs) and runtime problems (backend failures,
aborted stages). The CLI maps them to exit codes 1 and 2 respectively.
"""

from __future__ import annotations


class TwopassError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(TwopassError):
    """Input, config, or file-format problem detected before real work runs."""


class DataFormatError(ValidationError):
    """A file failed to parse; carries the offending line number when known."""

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:"
            if line is not None:
                prefix += f"{line}:"
            prefix += " "
        elif line is not None:
            prefix = f"line {line}: "
        super().__init__(prefix + message)


class UnknownSlotError(ValidationError):
    """A gold annotation referenced a slot absent from the schema table."""

    def __init__(self, slot: str, *, path: str | None = None, line: int | None = None):
        self.slot = slot
        where = f" ({path}:{line})" if path and line else ""
        super().__init__(f"unknown slot {slot!r}{where}")


class ConsistencyError(ValidationError):
    """Stored gold states disagree with the accumulation of gold turn beliefs."""


class ConfigError(ValidationError):
    """Run configuration is malformed, incomplete, or names unknown keys."""


class StageDependencyError(ValidationError):
    """A pipeline stage was invoked before the stages it depends on."""


class BackendError(TwopassError):
    """A completion or embedding backend failed."""


class TransportError(BackendError):
    """HTTP transport failed after exhausting the retry policy."""


class MissingRecordingError(BackendError):
    """Replay backend has no recording for the requested digest."""

    def __init__(self, digest: str):
        self.digest = digest
        super().__init__(f"no recording for request digest {digest}")


class DigestCollisionError(BackendError):
    """Two different responses were recorded under the same request digest."""


class TlbParseError(TwopassError):
    """Strict-mode completion parsing hit a malformed item."""

    def __init__(self, diagnostics: tuple[str, ...]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(diagnostics) or "malformed completion")


class StageError(TwopassError):
    """A pipeline stage aborted; names the stage for the operator."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")
