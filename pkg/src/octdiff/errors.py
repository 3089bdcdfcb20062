"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class ShapeMismatchError(ValueError):
    """Arrays that must share a shape do not."""


class DegenerateInputError(ValueError):
    """Input has no usable dynamic range or variance (constant image,
    zero-variance ROI, identical paired samples)."""


class DataFormatError(OSError):
    """A file could not be read as the expected format; message carries the path."""


class RegistrationError(RuntimeError):
    """An external registration command failed; carries its diagnostics."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss; carries the offending step context."""
