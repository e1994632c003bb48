"""Keypose detection from multi-view RGB-D with relative 3D attention over sampled ghost points."""

from .config import RunConfig, from_dict, load_config
from .head import KeyposeAction
from .model import KeyposeDetector, ModelPolicy

__version__ = "0.1.1"

__all__ = ["KeyposeAction", "KeyposeDetector", "ModelPolicy", "RunConfig", "from_dict", "load_config"]
