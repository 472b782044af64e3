"""
Probe Component

Frozen-encoder region embeddings (tiling + mean aggregation of patch tokens),
label mappings with the 7 -> 3 coarse grouping, and linear/MLP probes trained with
AdamW on those embeddings.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from components.corpus import CorpusManifest, resize_bilinear, stratified_assign
from components.errors import (
    ConfigError, DimensionError, GeometryError, NumericalError, ParameterError, ProbeError,
)
from components.layers import Linear, Mlp, Module
from components.metrics import RunMetrics, confusion, evaluate_predictions, f1_scores
from components.optim import AdamW
from components.tensor import Tape, Tensor, backward, cross_entropy
from components.vit_mae import MaeModel, encode_patch_tokens
from utils import rng as rngs
from utils.image_io import read_rgb

logger = logging.getLogger(__name__)

BRACS_CLASSES = ['Normal', 'Benign', 'UDH', 'ADH', 'FEA', 'DCIS', 'Invasive']
COARSE_CLASSES = ['benign', 'atypical', 'malignant']
DEFAULT_COARSE_MAP = {
    'Normal': 'benign', 'Benign': 'benign', 'UDH': 'benign',
    'ADH': 'atypical', 'FEA': 'atypical',
    'DCIS': 'malignant', 'Invasive': 'malignant',
}


@dataclass
class EmbeddingRecord:
    """One region's frozen embedding. `label` is a class index into the active LabelMapping."""
    region_id: str
    vector: np.ndarray
    label: Optional[int] = None
    split: Optional[str] = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.ndim != 1:
            raise DimensionError(f"embedding of {self.region_id} must be 1-D, got {self.vector.shape}")
        if not np.all(np.isfinite(self.vector)):
            raise NumericalError(f"embedding of {self.region_id} is not finite")


@dataclass
class LabelMapping:
    """Ordered class names, optionally with a total map onto coarser classes."""
    classes: List[str]
    coarse_map: Optional[Dict[str, str]] = None
    coarse_classes: Optional[List[str]] = None

    def __post_init__(self):
        self.classes = list(self.classes)
        if not self.classes or len(set(self.classes)) != len(self.classes):
            raise ConfigError(f"class names must be non-empty and unique, got {self.classes}")
        if self.coarse_map is not None:
            missing = [c for c in self.classes if c not in self.coarse_map]
            if missing:
                raise ConfigError(f"coarse map does not cover {missing}")
            if self.coarse_classes is None:
                self.coarse_classes = list(dict.fromkeys(self.coarse_map[c] for c in self.classes))
            stray = sorted({self.coarse_map[c] for c in self.classes} - set(self.coarse_classes))
            if stray:
                raise ConfigError(f"coarse map targets {stray} are not in coarse_classes")

    @classmethod
    def bracs(cls) -> 'LabelMapping':
        return cls(list(BRACS_CLASSES), dict(DEFAULT_COARSE_MAP), list(COARSE_CLASSES))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise ParameterError(f"unknown class {name!r}; expected one of {self.classes}") from None

    def coarse(self) -> 'LabelMapping':
        if self.coarse_map is None:
            raise ConfigError("label mapping has no coarse map")
        return LabelMapping(list(self.coarse_classes))


@dataclass
class ProbeConfig:
    """Probe head and its training schedule."""
    kind: str = 'mlp'
    hidden_dim: int = 256
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 1e-4
    seed: int = 0
    standardize: bool = True
    selection_metric: str = 'f1_macro'

    def validate(self) -> 'ProbeConfig':
        if self.kind not in ('linear', 'mlp'):
            raise ConfigError(f"probe kind must be 'linear' or 'mlp', got {self.kind!r}")
        if self.kind == 'mlp' and self.hidden_dim < 1:
            raise ConfigError(f"mlp probe needs hidden_dim >= 1, got {self.hidden_dim}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("probe needs epochs >= 1, batch_size >= 1, lr > 0 and weight_decay >= 0")
        if self.selection_metric not in ('f1_macro', 'f1_weighted'):
            raise ConfigError(f"selection_metric must be f1_macro or f1_weighted, got {self.selection_metric!r}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ProbeConfig':
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown probe keys: {sorted(unknown)}")
        return cls(**data).validate()


class Probe(Module):
    """Affine head (linear) or affine -> GELU -> affine head (mlp) over standardized embeddings."""

    def __init__(self, in_dim: int, num_classes: int, config: ProbeConfig, rng: np.random.Generator):
        if config.kind == 'linear':
            self.head = Linear(in_dim, num_classes, rng)
        else:
            self.head = Mlp(in_dim, config.hidden_dim, rng, out_dim=num_classes)
        self._in_dim = in_dim
        self._num_classes = num_classes
        self._mean = np.zeros(in_dim)
        self._std = np.ones(in_dim)

    @property
    def in_dim(self) -> int:
        return self._in_dim

    @property
    def num_classes(self) -> int:
        return self._num_classes

    def fit_standardizer(self, features: np.ndarray):
        self._mean = features.mean(axis=0)
        std = features.std(axis=0)
        self._std = np.where(std > 1e-12, std, 1.0)

    def __call__(self, features: np.ndarray) -> Tensor:
        if features.ndim != 2 or features.shape[1] != self._in_dim:
            raise DimensionError(f"probe expects [n, {self._in_dim}] features, got {features.shape}")
        return self.head(Tensor((features - self._mean) / self._std))


@dataclass
class TrainedProbe:
    probe: Probe
    best_epoch: int
    best_score: float
    history: List[float]


def _matrix(records: Sequence[EmbeddingRecord]) -> np.ndarray:
    return np.stack([r.vector for r in records]).astype(np.float64)


def _tile_origins(length: int, tile: int) -> List[int]:
    starts = list(range(0, length - tile + 1, tile))
    if starts[-1] + tile < length:
        starts.append(length - tile)
    return starts


def embed_region(model: MaeModel, image: np.ndarray, mode: str = 'tile') -> np.ndarray:
    """
    Encode a region of any size into one vector.

    Args:
        model: Frozen model
        image: [H, W, C] region (uint8 or unit float)
        mode: 'tile' splits into input_size tiles (edge tiles anchored to the far
            border); 'resize' squeezes the whole region into one tile

    Returns:
        float32 [encoder_dim]: mean of all patch-token outputs of all tiles

    Raises:
        GeometryError: If a side is below two patches
    """
    config = model.config
    size = config.input_size
    h, w = image.shape[:2]
    if min(h, w) < 2 * config.patch_size:
        raise GeometryError(f"region {h}x{w} is smaller than two patches ({2 * config.patch_size}px)")
    if mode == 'resize':
        tiles = [resize_bilinear(image, size)]
    elif mode == 'tile':
        if min(h, w) < size:
            factor = size / min(h, w)
            h, w = max(size, int(round(h * factor))), max(size, int(round(w * factor)))
            image = resize_bilinear(image, (h, w))
        tiles = [image[y:y + size, x:x + size] for y in _tile_origins(h, size) for x in _tile_origins(w, size)]
    else:
        raise ParameterError(f"embed mode must be 'tile' or 'resize', got {mode!r}")
    tokens = np.concatenate([encode_patch_tokens(model, tile) for tile in tiles]).astype(np.float64)
    return tokens.mean(axis=0).astype(np.float32)


def embed_manifest(model: MaeModel, manifest: CorpusManifest, mapping: Optional[LabelMapping] = None,
                   mode: str = 'tile', workers: int = 1) -> List[EmbeddingRecord]:
    """
    Embed every manifest row, in manifest order.

    Labels are resolved against `mapping`; rows keep their split tag.
    """
    def embed_row(row) -> EmbeddingRecord:
        vector = embed_region(model, read_rgb(manifest.resolve(row)), mode)
        label = None
        if row.label is not None:
            label = mapping.index(row.label) if mapping is not None else None
        return EmbeddingRecord(row.region_id, vector, label, row.split)

    if mapping is None and any(row.label is not None for row in manifest.rows):
        logger.warning("manifest has labels but no label mapping was given; labels dropped")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(embed_row, manifest.rows))
    else:
        records = [embed_row(row) for row in manifest.rows]
    logger.info(f"Embedded {len(records)} regions (dim {model.config.encoder_dim})")
    return records


def coarsen_labels(records: Sequence[EmbeddingRecord], mapping: LabelMapping) -> List[EmbeddingRecord]:
    """
    Replace fine class indices by coarse class indices.

    Raises:
        ParameterError: On a label outside the fine class list
    """
    coarse = mapping.coarse()
    out = []
    for record in records:
        if record.label is None:
            out.append(record)
            continue
        if not 0 <= record.label < mapping.num_classes:
            raise ParameterError(f"{record.region_id}: label {record.label} has no coarse class")
        target = mapping.coarse_map[mapping.classes[record.label]]
        out.append(replace(record, label=coarse.index(target)))
    return out


def _selection_score(probe: Probe, x: np.ndarray, y: np.ndarray, metric: str) -> float:
    scores, _ = predict_matrix(probe, x)
    f1 = f1_scores(confusion(y, np.argmax(scores, axis=1), probe.num_classes))
    return f1.macro if metric == 'f1_macro' else f1.weighted


def train_probe(records: Sequence[EmbeddingRecord], num_classes: int, config: ProbeConfig) -> TrainedProbe:
    """
    Fit a probe on the 'train' records, keeping the weights with the best 'val' F1.

    Args:
        records: Labeled embeddings tagged train/val (others are ignored)
        num_classes: Output classes
        config: Probe configuration; config.seed drives init and shuffling

    Returns:
        TrainedProbe with the selected weights restored

    Raises:
        ProbeError: If the train split has fewer than two classes
    """
    config.validate()
    train = [r for r in records if r.split == 'train' and r.label is not None]
    val = [r for r in records if r.split == 'val' and r.label is not None]
    if not train:
        raise ProbeError("no labeled train records")
    y_train = np.array([r.label for r in train], dtype=np.int64)
    if len(np.unique(y_train)) < 2:
        raise ProbeError(f"train split has a single class ({int(y_train[0])})")
    if y_train.max() >= num_classes:
        raise ProbeError(f"train label {int(y_train.max())} outside {num_classes} classes")
    x_train = _matrix(train)
    if val:
        x_val, y_val = _matrix(val), np.array([r.label for r in val], dtype=np.int64)
    else:
        logger.warning("no validation records; selecting probe weights on the train split")
        x_val, y_val = x_train, y_train

    rng = rngs.stream(config.seed, rngs.PROBE)
    probe = Probe(x_train.shape[1], num_classes, config, rng)
    if config.standardize:
        probe.fit_standardizer(x_train)
    params = probe.named_parameters()
    optimizer = AdamW(params, lr=config.lr, betas=(0.9, 0.999), weight_decay=config.weight_decay)

    best_score, best_epoch, best = -1.0, -1, None
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            with Tape():
                loss = cross_entropy(probe(x_train[batch]), y_train[batch])
            backward(loss)
            optimizer.step()
            optimizer.zero_grad()
        score = _selection_score(probe, x_val, y_val, config.selection_metric)
        history.append(score)
        if score > best_score:
            best_score, best_epoch = score, epoch
            best = {name: p.data.copy() for name, p in params.items()}
    for name, p in params.items():
        p.data = best[name]
    logger.debug(f"probe selected epoch {best_epoch} with validation {config.selection_metric} {best_score:.4f}")
    return TrainedProbe(probe, best_epoch, best_score, history)


def predict_matrix(probe: Probe, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Softmax probabilities (float64) and argmax labels, lowest index on ties."""
    logits = probe(np.asarray(features, dtype=np.float64)).data.astype(np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    scores = np.exp(shifted)
    scores /= scores.sum(axis=1, keepdims=True)
    return scores, np.argmax(scores, axis=1)


def predict(probe: Union[Probe, TrainedProbe], records: Sequence[EmbeddingRecord]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Class probabilities and predicted labels for records.

    Raises:
        DimensionError: If the embedding dim differs from the probe's input dim
    """
    probe = probe.probe if isinstance(probe, TrainedProbe) else probe
    if not records:
        return np.zeros((0, probe.num_classes)), np.zeros(0, dtype=np.int64)
    return predict_matrix(probe, _matrix(records))


def probe_experiment(records: Sequence[EmbeddingRecord], classes: Sequence[str], config: ProbeConfig,
                     seed: int, fractions: Sequence[float] = (0.7, 0.1, 0.2), resplit: bool = True) -> RunMetrics:
    """
    One evaluation run: stratified split, probe training, test-split metrics.

    Args:
        records: Labeled embeddings
        classes: Class names indexed by record label
        config: Probe configuration (its seed is replaced by `seed`)
        seed: Run seed for the split and the probe
        fractions: train/val/test fractions when resplitting
        resplit: Draw a new split from `seed`; otherwise use the records' split tags

    Returns:
        RunMetrics on the test split
    """
    labeled = [r for r in records if r.label is not None]
    if resplit:
        tags = stratified_assign([r.label for r in labeled], fractions, rngs.stream(seed, rngs.SPLITTING))
        labeled = [replace(r, split=tag) for r, tag in zip(labeled, tags)]
    test = [r for r in labeled if r.split == 'test']
    if not test:
        raise ProbeError("no test records to evaluate")
    trained = train_probe(labeled, len(classes), replace(config, seed=seed))
    scores, _ = predict(trained, test)
    return evaluate_predictions([r.label for r in test], scores, classes)


def load_mapping(path: Union[str, Path]) -> LabelMapping:
    """Read a label mapping JSON: {"classes": [...], "coarse_map": {...}, "coarse_classes": [...]}."""
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    unknown = set(data) - {'classes', 'coarse_map', 'coarse_classes'}
    if unknown:
        raise ConfigError(f"{path}: unknown mapping keys {sorted(unknown)}")
    if 'classes' not in data:
        raise ConfigError(f"{path}: mapping needs 'classes'")
    return LabelMapping(data['classes'], data.get('coarse_map'), data.get('coarse_classes'))
