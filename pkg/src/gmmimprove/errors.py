"""Exception types raised across the package."""


class GmmImproveError(Exception):
    """Base class for all package errors."""


class InsufficientDataError(GmmImproveError, ValueError):
    pass


class DegenerateComponentError(GmmImproveError, ValueError):
    pass


class InvalidStateError(GmmImproveError, ValueError):
    pass


class InvariantError(GmmImproveError, ValueError):
    """A policy or file violates the GMM invariants."""


class IntegrationError(GmmImproveError, ValueError):
    """Applying an update produced an invalid policy."""


class Rank1RejectedError(IntegrationError):
    """The rank-1 covariance update left the position block non-PD."""


class ConfigError(GmmImproveError, ValueError):
    pass
