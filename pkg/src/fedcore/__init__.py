"""Federated-learning incentive simulator built around a core-selecting payment rule."""

from .exceptions import CapabilityError, ConfigError, MechanismError, ParameterError

__version__ = "0.1.0"

__all__ = ["CapabilityError", "ConfigError", "MechanismError", "ParameterError", "__version__"]
