"""Exception types shared across the package."""


class PercepgenError(Exception):
    """Base class for all package errors."""


class ContractError(PercepgenError, ValueError):
    """An argument violates an operation's precondition."""


class DomainError(ContractError):
    """Image value domain or colour space is wrong for the operation."""


class PromptParseError(PercepgenError, ValueError):
    def __init__(self, message, token=None):
        super().__init__(message)
        self.token = token


class ProviderUnavailable(PercepgenError, RuntimeError):
    """A requested embedding/depth/segmentation provider cannot be used."""


class CheckpointError(PercepgenError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found, expected):
        super().__init__(
            f"checkpoint format version {found} is not supported "
            f"(this build reads version {expected})"
        )
        self.found = found
        self.expected = expected


class DatasetError(PercepgenError):
    pass


class TrainingError(PercepgenError, RuntimeError):
    pass
