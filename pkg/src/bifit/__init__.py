"""Referring video object segmentation with bidirectional vision-language
fusion and inter-frame interaction decoding, on a synthetic moving-shapes
corpus."""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .model import BifitModel, build_model

__all__ = ["RunConfig", "load_config", "BifitModel", "build_model", "__version__"]
