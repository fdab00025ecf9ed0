"""Exception hierarchy shared across the engine.

Exit codes used by the CLI: 0 success, 2 config error, 3 data error,
4 numeric failure.
"""


class EngineError(Exception):
    exit_code = 1


class ConfigError(EngineError):
    exit_code = 2


class DataError(EngineError):
    exit_code = 3


class SchemaConflictError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class NumericError(EngineError):
    exit_code = 4
