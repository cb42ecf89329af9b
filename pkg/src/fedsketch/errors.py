"""Exception hierarchy shared by every fedsketch module."""


class FedSketchError(Exception):
    """Base class for all package errors."""


class DimensionError(FedSketchError, ValueError):
    pass


class InvalidSketchRatioError(FedSketchError, ValueError):
    pass


class EmptyBatchError(FedSketchError, ValueError):
    pass


class EmptyDatasetError(FedSketchError, ValueError):
    pass


class InvalidPlanError(FedSketchError, ValueError):
    pass


class ProtocolViolationError(FedSketchError, RuntimeError):
    pass


class DegenerateProbesError(FedSketchError, ValueError):
    pass


class InconsistentObservationsError(FedSketchError, ValueError):
    pass


class PlanInfeasibleError(FedSketchError, ValueError):
    """Raised when no sampling vector can satisfy the convergence constraint.

    ``clients`` lists the offending client indices, when known.
    """

    def __init__(self, message: str, clients: tuple[int, ...] = ()):
        super().__init__(message)
        self.clients = tuple(clients)


class ConfigError(FedSketchError, ValueError):
    pass
