"""Error taxonomy shared by all engine modules.

ConfigurationError maps to CLI exit code 2, everything else to 3.
"""


class EngineError(Exception):
    """Base class for all engine errors."""


class ConfigurationError(EngineError):
    """Invalid configuration value; raised before any compute starts."""


class ContractError(EngineError):
    """An operation was called with inputs violating its contract."""


class NumericalError(EngineError):
    """A computation produced values outside its numerical guarantees."""


class ProtocolError(EngineError):
    """Malformed or out-of-order wire protocol traffic."""


class BackendError(EngineError):
    """A denoiser backend failed or timed out; aborts the sampling step."""
