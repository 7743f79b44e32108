"""Exception types shared across the package."""


class TmegraphError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(TmegraphError):
    """A table or config is missing a required column/field."""


class ParseError(TmegraphError):
    """Malformed input; carries the row number or byte offset when known."""

    def __init__(self, message, *, row=None, offset=None):
        self.row = row
        self.offset = offset
        where = ""
        if row is not None:
            where = f" (row {row})"
        elif offset is not None:
            where = f" (offset {offset})"
        super().__init__(message + where)


class ValidationError(TmegraphError):
    """Input parsed but violates a documented invariant."""
