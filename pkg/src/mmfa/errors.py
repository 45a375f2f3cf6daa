"""Exception hierarchy shared by every module.

``UserError`` subclasses are problems with inputs or configuration (CLI exit
code 2); anything else escaping a command is treated as an internal error.
"""


class MMFAError(Exception):
    pass


class UserError(MMFAError):
    pass


class ConfigurationError(UserError, ValueError):
    pass


class DegenerateInputError(UserError, ValueError):
    pass


class FormatError(UserError, ValueError):
    pass


class SampleNotFoundError(UserError, KeyError):
    def __str__(self):
        # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ContractError(MMFAError, ValueError):
    """Shapes or dimensions disagree between two components."""


class EmptyBankError(MMFAError, ValueError):
    pass


class UndefinedMetricError(UserError, ValueError):
    pass


class NumericalDegeneracyError(MMFAError, ArithmeticError):
    pass


class TrainingDivergedError(MMFAError, RuntimeError):
    pass
