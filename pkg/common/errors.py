"""Error hierarchy shared by every package; each class carries its CLI exit code."""


class FaacError(Exception):
    exit_code = 1


class ConfigurationError(FaacError):
    exit_code = 2


class FeatureMismatchError(ConfigurationError):
    pass


class EmptySelectionError(ConfigurationError):
    pass


class InputError(FaacError):
    exit_code = 3


class FlowParseError(InputError):
    def __init__(self, line_number, reason):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number
        self.reason = reason


class NumericalError(FaacError):
    exit_code = 4


class ConvergenceWarning(UserWarning):
    pass


def exit_code_for(error):
    """Exit code of any exception; errors raised outside the hierarchy map by kind."""
    if isinstance(error, FaacError):
        return error.exit_code
    if isinstance(error, (OSError, UnicodeError)):
        return InputError.exit_code
    # numpy's LinAlgError is a ValueError
    if isinstance(error, (ArithmeticError, ValueError)):
        return NumericalError.exit_code
    return FaacError.exit_code
