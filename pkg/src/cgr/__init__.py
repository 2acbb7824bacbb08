"""Context-conditioned group ranking of object affordances on synthetic scenes."""

from .config import ConfigError, RunConfig
from .model import CGRModel, ModelOutput

__all__ = ["CGRModel", "ConfigError", "ModelOutput", "RunConfig"]
__version__ = "0.1.0"
