"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument violates an operation's preconditions."""


class CapabilityError(RuntimeError):
    """The request is well formed but exceeds what an exact path can do (e.g. 2^n blowup)."""


class MechanismError(RuntimeError):
    """The core-selecting step failed; carries solver diagnostics when available."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(ValueError):
    """Invalid experiment configuration. ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
