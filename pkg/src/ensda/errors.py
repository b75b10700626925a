"""Exception hierarchy shared across the framework."""


class EnsdaError(Exception):
    """Base class for all framework errors."""


class ConfigurationError(EnsdaError):
    """Invalid study configuration or violated call precondition."""


class DegenerateEnsembleError(ConfigurationError):
    """Ensemble too small to form anomalies (fewer than 2 members)."""


class NumericalError(EnsdaError):
    """A numerical operation failed (factorization, NaN state, ...)."""


class ProtocolError(EnsdaError):
    """Malformed, unknown, or inconsistent wire message."""


class CheckpointError(EnsdaError):
    """Checkpoint file is unreadable, corrupt, or incompatible."""


class ReportError(EnsdaError):
    """Metrics file could not be parsed or aggregated."""
