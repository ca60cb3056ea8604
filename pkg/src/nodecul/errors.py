"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: data errors -> 2, numeric errors -> 3.
"""


class NodeCulError(Exception):
    """Base class for all errors raised by this package."""


class DataError(NodeCulError):
    """Problems with input data or on-disk artifacts."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None, source: str = ""):
        self.line = line
        self.source = source
        where = f"{source} line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class DimensionError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class ConfigError(NodeCulError):
    pass


class GraphTooSmallError(DataError):
    pass


class ContractError(NodeCulError):
    """A caller violated a documented precondition."""


class ShapeError(ContractError):
    pass


class NumericError(NodeCulError):
    """Non-finite values appeared in a computation."""


class TrainingError(NumericError):
    pass


class InsufficientShadowsError(NodeCulError):
    pass
