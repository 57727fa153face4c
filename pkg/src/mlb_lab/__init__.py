"""Multi-loss balanced training of two-modality classifiers on a small numpy core."""

from mlb_lab.errors import (
    ConfigError,
    ContractError,
    DimensionError,
    InputError,
    NonFiniteLossError,
    OracleError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "InputError",
    "NonFiniteLossError",
    "OracleError",
]
