"""Exception hierarchy and process exit codes for ldplcm.

Library code raises these; only the CLI catches them and maps each family
to its own exit code.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CONTRACT = 4
EXIT_INTERRUPTED = 130


class LdplcmError(Exception):
    """Base class for every error raised by ldplcm."""


class ConfigError(LdplcmError, ValueError):
    """Invalid experiment configuration or parameter value."""


class ContractError(LdplcmError):
    """A caller violated an operation's precondition."""


class ReportRejected(ContractError):
    """A client report did not match the sketch shape."""


class ArtifactError(LdplcmError):
    """An artifact file is unreadable, truncated, or incompatible."""


class IngestError(ArtifactError):
    """A dataset file could not be parsed.

    Attributes:
        line: 1-based line number of the offending line, if known
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
