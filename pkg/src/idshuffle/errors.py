"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, TrainingFault -> 4.
"""


class IdShuffleError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(IdShuffleError):
    """Invalid, inconsistent, or unsupported configuration."""


class DataError(IdShuffleError):
    """Missing or malformed dataset artifacts (files, manifests, splits)."""


class TrainingFault(IdShuffleError):
    """Runtime fault during training, e.g. a non-finite loss.

    Carries a diagnostics dict (stage, epoch, iteration, per-term loss
    values, offending batch ids) so aborts are debuggable from logs.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        detail = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"{base} [{detail}]"
