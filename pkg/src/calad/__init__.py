"""Post-hoc calibrated anomaly detection at desk scale."""

__version__ = "0.1.0"

from .errors import CaladError, ConfigError, DataError, NumericalError

__all__ = ["CaladError", "ConfigError", "DataError", "NumericalError",
           "__version__"]
