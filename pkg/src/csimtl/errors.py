"""Exception types shared across the package.

Each class maps to one CLI exit code (see :mod:`csimtl.cli`).
"""


class ConfigError(ValueError):
    """Invalid configuration, profile or argument value."""


class ProfileError(ConfigError):
    """A scenario profile violates one or more of its bounds."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid profile: " + "; ".join(self.violations))


class FormatError(ValueError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class PayloadLengthError(FormatError):
    """A binary file ended before its declared payload."""


class IntegrityError(ValueError):
    """Two artifacts that must agree (dims, ratios, tensor counts) do not."""


class DegenerateScaleError(ValueError):
    """Normalization scale is zero, i.e. the data is identically zero."""


class ZeroReferenceError(ZeroDivisionError):
    """A reference channel with zero energy was passed to the NMSE."""

    def __init__(self, index):
        self.index = index
        super().__init__(f"reference sample {index} has zero norm")
