"""
Utilities Package

Shared utilities for the HMAE pipeline: presets, random streams and image IO.
"""

from .preset_loader import PresetLoader, load_preset
from .rng import stream

__all__ = ['PresetLoader', 'load_preset', 'stream']
