"""Evidence-driven multi-agent interpretation of fetal ultrasound studies."""

__version__ = "0.1.0"

from .errors import SonagentError

__all__ = ["SonagentError", "__version__"]
