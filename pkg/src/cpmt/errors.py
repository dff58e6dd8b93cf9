"""Exception hierarchy; ``exit_code`` maps each family onto the CLI's exit status."""


class CPMTError(Exception):
    exit_code = 1


class ConfigError(CPMTError, ValueError):
    exit_code = 2


class DataError(CPMTError):
    exit_code = 3


class FormatError(DataError):
    """Malformed tensor/checkpoint file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(CPMTError, ArithmeticError):
    exit_code = 4


class DimensionError(CPMTError, ValueError):
    exit_code = 4


class MaskError(CPMTError, ValueError):
    exit_code = 4


class LLMError(CPMTError):
    exit_code = 3


class LLMLookupError(LLMError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class LLMTransportError(LLMError):
    def __init__(self, message: str, retries: int):
        super().__init__(f"{message} (after {retries} retries)")
        self.retries = retries
