"""Exception types shared across the package."""


class VitpqError(Exception):
    """Base class for all vitpq errors."""


class ShapeError(VitpqError):
    """Tensor dimensions are inconsistent with an operation's contract."""


class ConfigError(VitpqError):
    """Invalid or inconsistent configuration."""


class CalibrationError(VitpqError):
    """Calibration inputs are empty or do not cover a required site."""


class AllocationError(VitpqError):
    """A bit allocation cannot satisfy its constraints."""


class DomainError(VitpqError):
    """An input is outside an operation's mathematical domain."""


class UsageError(VitpqError):
    """An API was called in a way its contract forbids."""


class ContractError(VitpqError):
    """A value violates a documented data contract."""


class DivergenceError(VitpqError):
    """Training produced a non-finite loss."""


class DegenerateError(VitpqError):
    """An input is degenerate (e.g. all-zero scores) and has no valid result."""
