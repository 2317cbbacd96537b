"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class FvStackError(Exception):
    exit_code = 1


class ConfigError(FvStackError, ValueError):
    exit_code = 2


class DataError(FvStackError, ValueError):
    exit_code = 3


class DescriptorFormatError(DataError):
    """Malformed descriptor/representation file. ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NumericError(FvStackError, ArithmeticError):
    exit_code = 4
