"""Exception hierarchy.

Two families matter for the CLI exit-code contract: ``ValidationError``
(bad inputs, budgets, shapes -> exit 1) and ``FormatError`` (corrupt or
unreadable files -> exit 2, together with plain ``OSError``).
"""


class KVLabError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(KVLabError):
    """Invalid inputs or parameter combinations."""


class ConfigurationError(ValidationError):
    """Invalid model/policy configuration (bad dimensions, unknown kind)."""


class LengthError(ValidationError):
    """Sequence exceeds the configured maximum length."""


class SegmentationError(ValidationError):
    """Shot/mandatory ranges inconsistent with the prompt."""


class BudgetError(ValidationError):
    """Ratio outside (0, 1] or a budget too small for the policy."""


class RetentionError(ValidationError):
    """Retained index not present in the targeted cache segment."""


class TraceError(ValidationError):
    """Attention trace missing required rows or has inconsistent shape."""


class SelectionError(ValidationError):
    """Top-k selection asked for more items than exist."""


class DegenerateCurveError(ValidationError):
    """Coverage curve undefined because the remaining mass is zero."""


class ZeroBaselineError(ValidationError):
    """Relative performance change undefined for a zero baseline."""


class FormatError(KVLabError):
    """Corrupt, truncated or foreign bytes where a KVTR file was expected."""
