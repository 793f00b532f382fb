"""Exception hierarchy shared by the estimation modules."""


class FriPerkError(Exception):
    """Base class for all package errors."""


class LayoutError(FriPerkError, ValueError):
    """Pilot layout or measurement dimensions are inconsistent."""


class PlacementError(FriPerkError, ValueError):
    """Delays cannot be placed in (or lie outside) the admissible window."""


class DenseCapExceeded(FriPerkError, ValueError):
    """A dense O(M^2) representation was requested above the configured cap."""


class IllPosedSupportError(FriPerkError, ValueError):
    """Support estimate leads to a numerically singular system."""


class ConvergenceError(FriPerkError, RuntimeError):
    """An iterative eigensolver failed to converge within its iteration cap."""


class ConfigError(FriPerkError, ValueError):
    """Experiment configuration is malformed or inconsistent."""
