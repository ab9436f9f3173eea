"""Exception types shared across the package."""


class AttnferError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(AttnferError, ValueError):
    pass


class NonFinite(AttnferError, FloatingPointError):
    pass


class BadAxis(AttnferError, ValueError):
    pass


class DegenerateOutput(AttnferError, ValueError):
    pass


class BadLabel(AttnferError, ValueError):
    pass


class BadReduction(AttnferError, ValueError):
    pass


class BadKernel(AttnferError, ValueError):
    pass


class BadChannelCount(AttnferError, ValueError):
    pass


class BadDepth(AttnferError, ValueError):
    pass


class StaleCache(AttnferError, RuntimeError):
    """Backward was requested without a matching train-mode forward."""


class ConfigError(AttnferError, ValueError):
    pass


class EmptyDataset(AttnferError, ValueError):
    pass


class ParseError(AttnferError, ValueError):
    """Malformed input file. ``row`` is the 1-based data row when known."""

    def __init__(self, message, row=None, path=None):
        self.row = row
        self.path = path
        prefix = []
        if path is not None:
            prefix.append(str(path))
        if row is not None:
            prefix.append(f"row {row}")
        if prefix:
            message = f"{': '.join(prefix)}: {message}"
        super().__init__(message)
