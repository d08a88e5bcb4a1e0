"""Exception hierarchy. Each class maps to a distinct CLI exit code."""


class DnfError(Exception):
    exit_code = 1


class ContractViolation(DnfError, ValueError):
    """Caller passed arrays with incompatible shapes or out-of-range arguments."""

    exit_code = 2


class ConfigError(DnfError):
    exit_code = 3


class DataParseError(DnfError):
    exit_code = 5

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class EmptyDataError(DnfError):
    exit_code = 5


class SingularMatrixError(DnfError):
    exit_code = 6


class DegenerateLayerError(DnfError):
    exit_code = 6


class InversionFailure(DnfError):
    exit_code = 6


class DivergenceError(DnfError):
    """Integration produced a non-finite state or a state with norm above the guard."""

    exit_code = 6

    def __init__(self, message, time=None, segment=None, sample=None):
        super().__init__(message)
        self.time = time
        self.segment = segment
        self.sample = sample


class TrainingFailure(DnfError):
    exit_code = 6

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(DnfError):
    exit_code = 7


class CheckpointCorrupted(CheckpointError):
    """Truncated file, bad magic or digest mismatch."""


class CheckpointVersionError(CheckpointError):
    pass
