"""Blended instance masks: crop bases inside boxes, weight them with per-instance attention."""

from .blender import BlendConfig, ConfigError, blend, blend_pipeline
from .roi import BoxProposal

__version__ = "0.1.0"

__all__ = ["BlendConfig", "BoxProposal", "ConfigError", "blend", "blend_pipeline", "__version__"]
