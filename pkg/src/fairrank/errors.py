"""Exception hierarchy shared by every fairrank module."""


class FairRankError(Exception):
    """Base class for all library errors."""


class ContractError(FairRankError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class ConfigError(FairRankError, ValueError):
    """Invalid or infeasible configuration."""


class DataError(FairRankError, ValueError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    def __init__(self, path, line, column, message):
        self.path = str(path)
        self.line = line
        self.column = column
        super().__init__(f"{path}:{line}:{column}: {message}")


class ReferentialIntegrityError(DataError):
    """A history or impression names a news id missing from the catalog."""


class DivergenceError(FairRankError, ArithmeticError):
    def __init__(self, batch_index, epoch=None):
        self.batch_index = batch_index
        self.epoch = epoch
        where = f"batch {batch_index}" if epoch is None else f"epoch {epoch}, batch {batch_index}"
        super().__init__(f"non-finite loss or gradient at {where}")


class ProbeError(FairRankError):
    """The fairness probe cannot be fitted on the available users."""
