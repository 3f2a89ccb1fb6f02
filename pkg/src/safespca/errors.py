"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SafeSPCAError(Exception):
    exit_code = 1


class FormatError(SafeSPCAError, ValueError):
    """Malformed input file (corpus, vocabulary, matrix or cache)."""

    exit_code = 2

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class NumericalError(SafeSPCAError, ArithmeticError):
    exit_code = 3


class NotPositiveDefiniteError(NumericalError):
    pass


class InfeasibleError(SafeSPCAError, ValueError):
    """Configuration cannot be satisfied (e.g. lambda removes every feature)."""

    exit_code = 4
