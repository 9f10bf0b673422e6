"""Exception types raised across the package."""


class ConfigError(ValueError):
    """A model, training, or dataset configuration is invalid."""


class InfeasibleBudgetError(ValueError):
    """The requested average cost is below the cost of the cheapest exit."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


class IdxFormatError(ValueError):
    """An IDX file is malformed.

    Attributes:
        offset: byte offset at which the problem was detected.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
