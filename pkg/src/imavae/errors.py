"""Exception hierarchy shared by all modules."""


class ImaVaeError(Exception):
    """Base class for every error raised by the package."""


class EvaluationError(ImaVaeError):
    """A tape node produced a non-finite value."""


class OracleError(ImaVaeError):
    """The finite-difference oracle probed a point where the map is undefined."""


class ConfigurationError(ImaVaeError):
    pass


class DomainError(ImaVaeError):
    """Input outside the domain of a mixing or density."""


class SingularityError(ImaVaeError):
    pass


class InconsistencyError(ImaVaeError):
    """A supplied preimage does not map to the supplied observation."""


class EstimationError(ImaVaeError):
    pass


class MetricError(ImaVaeError):
    pass


class TrainingError(ImaVaeError):
    """Training produced a non-finite loss."""


class ContractError(ImaVaeError):
    pass
