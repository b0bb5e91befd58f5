"""Exception taxonomy shared across the package.

Every raised error is a subclass of MoeLabError so callers (notably the
CLI) can map failures to exit-code categories without string matching.
"""


class MoeLabError(Exception):
    """Base class for all package errors."""


class DimensionError(MoeLabError):
    """Tensor shapes are incompatible for the requested operation."""


class ParameterError(MoeLabError):
    """An argument or configuration value violates a documented precondition."""


class ContractError(MoeLabError):
    """An internal API contract was violated (e.g. non-scalar loss)."""


class NumericError(MoeLabError):
    """Invalid numeric input (NaN/Inf) or a degenerate numeric result."""


class ConfigError(MoeLabError):
    """Invalid experiment configuration."""


class RunError(MoeLabError):
    """A training run failed mid-flight (e.g. divergence).

    Carries the step index and, when available, the partial run record so
    callers can still emit a final report.
    """

    def __init__(self, message, step=None, record=None):
        super().__init__(message)
        self.step = step
        self.record = record


class FormatError(MoeLabError):
    """A serialized artifact (checkpoint, report, record) failed to parse."""
