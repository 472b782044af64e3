"""
Image IO Utility

Reads and writes 8-bit images with Pillow.
"""

import os
import logging
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def read_rgb(path: PathLike) -> np.ndarray:
    """
    Load an image as uint8 RGB.

    Args:
        path: Image file

    Returns:
        Array of shape [H, W, 3]
    """
    with Image.open(path) as img:
        return np.asarray(img.convert('RGB'), dtype=np.uint8).copy()


def write_rgb(path: PathLike, pixels: np.ndarray):
    """Save a uint8 [H, W, 3] array as PNG."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format='PNG')


def write_gray(path: PathLike, pixels: np.ndarray):
    """Save a uint8 [H, W] array as PGM or PNG depending on the extension."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fmt = 'PPM' if os.path.splitext(str(path))[1].lower() == '.pgm' else 'PNG'
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format=fmt)


def read_gray(path: PathLike) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert('L'), dtype=np.uint8).copy()


def to_unit(pixels: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float32 in [0, 1]."""
    return pixels.astype(np.float32) / 255.0
