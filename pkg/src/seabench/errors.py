"""Exception types raised across the package."""


class SeaBenchError(Exception):
    pass


class ConfigError(SeaBenchError, ValueError):
    """Invalid configuration value, unknown key, or infeasible request."""


class ShapeError(SeaBenchError, ValueError):
    pass


class StateError(SeaBenchError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class ContractError(SeaBenchError, ValueError):
    pass


class TrainingError(SeaBenchError, RuntimeError):
    pass


class FormatError(SeaBenchError, ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    def __init__(self, found: int, supported: int, offset: int | None = None):
        super().__init__(
            f"unsupported format version {found} (this build reads version {supported})",
            offset,
        )
        self.found = found
        self.supported = supported


class EvalSetError(SeaBenchError, ValueError):
    def __init__(self, requested: int, qualifying: int):
        super().__init__(
            f"requested {requested} evaluation samples but only {qualifying} "
            "qualify (correctly classified by every pool model)"
        )
        self.requested = requested
        self.qualifying = qualifying
