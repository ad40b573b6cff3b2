"""Exception hierarchy shared by every bolt module.

Validation problems (bad shapes, bad files, bad arguments) derive from
``ValidationError``; numerical breakdowns derive from ``NumericError``.
The CLI maps the two families to exit codes 1 and 2.
"""


class BoltError(Exception):
    pass


class ValidationError(BoltError, ValueError):
    pass


class ArchitectureError(ValidationError):
    """Two containers disagree on their (name, shape) layer sets."""

    def __init__(self, message, layers=()):
        self.layers = tuple(layers)
        if self.layers:
            message = f"{message}: {', '.join(self.layers)}"
        super().__init__(message)


class FormatError(ValidationError):
    """A BTC-v1 file could not be parsed."""


class BadMagicError(FormatError):
    def __init__(self, found=b""):
        super().__init__(f"bad magic: {found!r}")


class TruncatedPayloadError(FormatError):
    def __init__(self, expected, got):
        super().__init__(f"truncated payload: expected {expected} bytes, got {got}")


class ManifestMismatchError(FormatError):
    pass


class NumericError(BoltError, ArithmeticError):
    pass


class DegenerateBasisError(NumericError):
    pass
