"""Exception types raised across the filtering and benchmarking layers."""


class GsfError(Exception):
    """Base class for all library-specific failures."""


class DegenerateCovariance(GsfError):
    """A covariance is singular or indefinite where a density is required."""


class DegenerateInnovation(GsfError):
    """An innovation covariance cannot be factorized; the update is undefined."""


class NoConvergence(GsfError):
    """An iterative solver exhausted its budget without meeting tolerance."""


class MissingTruth(GsfError):
    """Ground-truth cluster labels were required but are not available."""


class MissingGains(GsfError):
    """A gain schedule was required but is absent or too short."""
