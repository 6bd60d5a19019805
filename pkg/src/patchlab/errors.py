"""Exception types raised across patchlab."""


class PatchlabError(Exception):
    """Base class for all library errors."""


class ShapeError(PatchlabError, ValueError):
    pass


class ContractError(PatchlabError, ValueError):
    pass


class ParameterError(PatchlabError, ValueError):
    pass


class FormatError(PatchlabError, ValueError):
    """Malformed binary container. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(PatchlabError, ValueError):
    pass


class ConfigError(PatchlabError, ValueError):
    pass


class ComparisonError(PatchlabError, ValueError):
    pass


class UnsupportedCaseError(PatchlabError, NotImplementedError):
    pass


class TrainingError(PatchlabError, RuntimeError):
    pass
