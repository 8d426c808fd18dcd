"""Image forgery localization with guided-noise features, built on a small
reverse-mode autodiff core."""

from .config import RunConfig
from .model import ForgeryNet, ModelConfig

__all__ = ["ForgeryNet", "ModelConfig", "RunConfig"]
__version__ = "0.1.0"
