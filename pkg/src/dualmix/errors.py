"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it verbatim so
callers can dispatch on failures without parsing messages.
"""


class DualmixError(Exception):
    category = "error"


class FormatError(DualmixError):
    category = "format"


class ShapeError(DualmixError, ValueError):
    category = "shape"


class DomainError(DualmixError, ValueError):
    category = "domain"


class ContractError(DualmixError):
    category = "contract"


class CapacityError(DualmixError):
    category = "capacity"


class SplitError(DualmixError):
    category = "split"


class ParameterError(DualmixError, ValueError):
    category = "parameter"


class ConfigError(DualmixError):
    category = "config"


class StorageError(DualmixError):
    category = "io"


class TrainingError(DualmixError):
    category = "training"

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


ERROR_CATEGORIES = tuple(
    cls.category
    for cls in (
        FormatError,
        ShapeError,
        DomainError,
        ContractError,
        CapacityError,
        SplitError,
        ParameterError,
        ConfigError,
        TrainingError,
        StorageError,
    )
)
