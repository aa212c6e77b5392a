"""Exception hierarchy shared by the library and the CLI.

``ValidationError`` subclasses map to CLI exit code 2, everything else to 1.
"""


class NeurotypeError(Exception):
    pass


class ValidationError(NeurotypeError):
    pass


class ShapeError(ValidationError):
    pass


class LabelError(ValidationError):
    pass


class ContractError(NeurotypeError):
    pass


class NonFiniteError(NeurotypeError, FloatingPointError):
    pass


class SchemaError(ValidationError):
    pass


class IngestionError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class SplitError(ValidationError):
    pass


class DivergenceError(NeurotypeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
