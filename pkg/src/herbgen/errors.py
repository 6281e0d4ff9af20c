"""Exception hierarchy; the CLI maps each class to an exit code."""


class HerbgenError(Exception):
    exit_code = 1


class UsageError(HerbgenError, ValueError):
    exit_code = 1


class DataError(HerbgenError, ValueError):
    exit_code = 2


class NumericError(HerbgenError, ArithmeticError):
    exit_code = 3
