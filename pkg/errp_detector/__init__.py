"""Generic asynchronous ErrP detection: filtering, classifier, online detector, simulator and evaluation."""
from .config import Settings, load_settings
from .errors import ErrpError

__version__ = "0.1.0"

__all__ = ["Settings", "load_settings", "ErrpError", "__version__"]
