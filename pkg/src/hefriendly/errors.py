"""Exception hierarchy shared by every subpackage."""


class HEFriendlyError(Exception):
    """Base class for all library errors."""


class DimensionError(HEFriendlyError, ValueError):
    """Tensor shapes do not conform for the requested operation."""


class ContractError(HEFriendlyError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(HEFriendlyError, FloatingPointError):
    """A NaN or infinity appeared in a forward value or gradient."""

    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class InvariantError(HEFriendlyError, ValueError):
    """Stored state is internally inconsistent (e.g. negative variance)."""


class ConfigError(HEFriendlyError, ValueError):
    pass


class DataError(HEFriendlyError, ValueError):
    pass


class FoldError(HEFriendlyError, ValueError):
    """Batch-norm folding cannot be applied to the given graph."""


class FinalizationError(HEFriendlyError, ValueError):
    pass


class CheckpointError(HEFriendlyError, IOError):
    pass
