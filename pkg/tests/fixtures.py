"""
Test fixtures and synthetic data for the HMAE pipeline.
"""

from pathlib import Path
from typing import List, Sequence

import numpy as np

from components.corpus import stratified_assign
from components.probe import EmbeddingRecord
from components.vit_mae import ViTConfig
from utils.image_io import write_rgb

# Acceptance-scale model: input 32, patch 8, dim 64, depth 2
TINY_MODEL = {
    "input_size": 32,
    "patch_size": 8,
    "channels": 3,
    "encoder_dim": 64,
    "encoder_depth": 2,
    "encoder_heads": 4,
    "decoder_dim": 32,
    "decoder_depth": 1,
    "decoder_heads": 4,
    "mlp_ratio": 2.0,
    "mask_ratio": 0.75,
}

# Small enough for float64 gradient checks over every parameter
MICRO_MODEL = {
    "input_size": 8,
    "patch_size": 4,
    "channels": 3,
    "encoder_dim": 8,
    "encoder_depth": 1,
    "encoder_heads": 2,
    "decoder_dim": 8,
    "decoder_depth": 1,
    "decoder_heads": 2,
    "mlp_ratio": 2.0,
    "mask_ratio": 0.5,
}

SAMPLE_ROI_SIDES = [100, 200]

BRACS_LABELS = ['Normal', 'Benign', 'UDH', 'ADH', 'FEA', 'DCIS', 'Invasive']


def tiny_config(**overrides) -> ViTConfig:
    return ViTConfig(**{**TINY_MODEL, **overrides}).validate()


def micro_config(**overrides) -> ViTConfig:
    return ViTConfig(**{**MICRO_MODEL, **overrides}).validate()


def noise_slide(height: int = 256, width: int = 256, seed: int = 0) -> np.ndarray:
    """Uniform RGB noise, uint8."""
    return np.random.default_rng(seed).integers(0, 256, size=(height, width, 3), dtype=np.uint8)


def constant_image(size: int, value: int) -> np.ndarray:
    return np.full((size, size, 3), value, dtype=np.uint8)


def mostly_blank_slide(size: int = 400, textured_side: int = 126, seed: int = 0) -> np.ndarray:
    """
    White slide with a noise square in the top-left corner covering about 10% of the area.

    Returns:
        uint8 [size, size, 3]
    """
    slide = np.full((size, size, 3), 255, dtype=np.uint8)
    slide[:textured_side, :textured_side] = noise_slide(textured_side, textured_side, seed)
    return slide


def synthetic_images(count: int = 8, size: int = 32, seed: int = 0) -> List[np.ndarray]:
    """
    Smooth, distinct RGB patterns (oriented sinusoids over a color ramp) in [0, 1], float32.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    images = []
    for i in range(count):
        angle = np.pi * i / count
        freq = 1.0 + (i % 3)
        wave = 0.5 + 0.35 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
        tint = rng.uniform(0.3, 1.0, size=3)
        image = np.stack([wave * tint[c] + 0.1 * c * yy for c in range(3)], axis=-1)
        images.append(np.clip(image, 0.0, 1.0).astype(np.float32))
    return images


def write_slides(directory: Path, slides: Sequence[np.ndarray], prefix: str = 'slide') -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, pixels in enumerate(slides):
        paths.append(directory / f"{prefix}_{i}.png")
        write_rgb(paths[-1], pixels)
    return paths


def gaussian_embeddings(classes: int = 3, per_class: int = 60, dim: int = 16, separation: float = 10.0,
                        seed: int = 0, split: str = None) -> List[EmbeddingRecord]:
    """
    Unit-variance Gaussian clusters whose means lie `separation` sigmas apart.

    Class c has its mean at separation * e_c (c < dim).
    """
    rng = np.random.default_rng(seed)
    records = []
    for c in range(classes):
        center = np.zeros(dim)
        center[c % dim] = separation
        for j in range(per_class):
            vector = center + rng.normal(size=dim)
            records.append(EmbeddingRecord(f"r{c}_{j:04d}", vector.astype(np.float32), c, split))
    return records


def with_splits(records: List[EmbeddingRecord], fractions=(0.7, 0.1, 0.2), seed: int = 0) -> List[EmbeddingRecord]:
    tags = stratified_assign([r.label for r in records], fractions, np.random.default_rng(seed))
    return [EmbeddingRecord(r.region_id, r.vector, r.label, tag) for r, tag in zip(records, tags)]
