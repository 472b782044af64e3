"""
Run Configuration Utility

RunConfig is assembled from a named preset, an optional JSON file, `--set`
overrides and the `--seed`/`--threads` flags, in that order. Unknown keys are
rejected and every section is validated at load time.
"""

import json
import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from components.corpus import SizeDistribution
from components.errors import ConfigError, HmaeError
from components.probe import BRACS_CLASSES, COARSE_CLASSES, DEFAULT_COARSE_MAP, LabelMapping, ProbeConfig
from components.vit_mae import ViTConfig
from utils.preset_loader import load_preset, read_json_object

logger = logging.getLogger(__name__)

# task -> (coarsen labels, headline metric, forced probe kind)
TASKS = {
    'coarse': (True, 'f1_macro', None),
    'fine': (False, 'f1_weighted', None),
    'transfer': (False, 'f1_macro', 'linear'),
}


@dataclass
class TrainingConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1.5e-4
    min_lr: float = 0.0
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    log_every: int = 100
    checkpoint_every: int = 0

    def validate(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("training.steps and training.batch_size must be >= 1")
        if self.lr <= 0 or self.min_lr < 0 or self.min_lr > self.lr:
            raise ConfigError(f"need 0 <= training.min_lr <= training.lr and lr > 0, got {self.min_lr}, {self.lr}")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ConfigError(f"training.warmup_steps must lie in [0, steps], got {self.warmup_steps}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("training betas must lie in [0, 1), eps > 0, weight_decay >= 0")
        if self.log_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("training.log_every and training.checkpoint_every must be >= 0")


@dataclass
class CorpusConfig:
    count: int = 200
    threshold: float = 0.05
    mu: float = 256.0
    sigma: float = 64.0
    clamp_min: int = 64
    clamp_max: int = 512
    label_from_slide: bool = False
    budget_factor: int = 100

    def validate(self):
        if self.count < 1 or self.budget_factor < 1:
            raise ConfigError("corpus.count and corpus.budget_factor must be >= 1")
        if self.threshold < 0:
            raise ConfigError(f"corpus.threshold must be >= 0, got {self.threshold}")
        try:
            self.size_distribution()
        except HmaeError as e:
            raise ConfigError(f"corpus size distribution: {e}") from e

    def size_distribution(self) -> SizeDistribution:
        return SizeDistribution(self.mu, self.sigma, self.clamp_min, self.clamp_max).validate()


@dataclass
class EvalConfig:
    task: str = 'coarse'
    runs: int = 100
    fractions: List[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])
    resplit: bool = True
    classes: List[str] = field(default_factory=lambda: list(BRACS_CLASSES))
    coarse_map: Optional[Dict[str, str]] = field(default_factory=lambda: dict(DEFAULT_COARSE_MAP))
    coarse_classes: Optional[List[str]] = field(default_factory=lambda: list(COARSE_CLASSES))
    embed_mode: str = 'tile'
    perplexity: float = 30.0
    tsne_iterations: int = 1000
    tsne_learning_rate: float = 200.0
    exaggeration: float = 4.0
    scatter_png: bool = True
    heatmap_format: str = 'png'

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"eval.task must be one of {sorted(TASKS)}, got {self.task!r}")
        if self.runs < 1:
            raise ConfigError(f"eval.runs must be >= 1, got {self.runs}")
        if len(self.fractions) != 3 or min(self.fractions) < 0 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"eval.fractions must be three non-negative values summing to 1, got {self.fractions}")
        if self.embed_mode not in ('tile', 'resize'):
            raise ConfigError(f"eval.embed_mode must be 'tile' or 'resize', got {self.embed_mode!r}")
        if self.heatmap_format not in ('png', 'pgm'):
            raise ConfigError(f"eval.heatmap_format must be 'png' or 'pgm', got {self.heatmap_format!r}")
        if self.perplexity <= 0 or self.tsne_iterations < 1 or self.tsne_learning_rate <= 0 or self.exaggeration < 1:
            raise ConfigError("t-SNE needs perplexity > 0, iterations >= 1, learning rate > 0, exaggeration >= 1")
        if TASKS[self.task][0] and self.coarse_map is None:
            raise ConfigError(f"eval.task {self.task!r} needs eval.coarse_map")
        self.mapping()

    def mapping(self) -> LabelMapping:
        return LabelMapping(self.classes, self.coarse_map, self.coarse_classes)

    @property
    def headline(self) -> str:
        return TASKS[self.task][1]


@dataclass
class PathsConfig:
    """Default locations used when a command is called without the matching path."""
    slides_dir: Optional[str] = None
    out_dir: Optional[str] = None
    corpus_dir: Optional[str] = None
    roi_sizes: Optional[str] = None
    manifest: Optional[str] = None
    checkpoint: Optional[str] = None
    embeddings: Optional[str] = None
    mapping: Optional[str] = None
    report: Optional[str] = None
    attention_dir: Optional[str] = None
    projection: Optional[str] = None

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None and (not isinstance(value, str) or not value.strip()):
                raise ConfigError(f"paths.{f.name} must be a non-empty string or null, got {value!r}")


SECTIONS = {
    'model': ViTConfig,
    'training': TrainingConfig,
    'corpus': CorpusConfig,
    'probe': ProbeConfig,
    'eval': EvalConfig,
    'paths': PathsConfig,
}
SCALARS = ('seed', 'threads')


@dataclass
class RunConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    threads: int = 1

    def validate(self) -> 'RunConfig':
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        for name in SECTIONS:
            getattr(self, name).validate()
        if self.corpus.clamp_min < 2 * self.model.patch_size:
            raise ConfigError(f"corpus.clamp_min {self.corpus.clamp_min} is below two patches "
                              f"({2 * self.model.patch_size}px)")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def probe_config(self) -> ProbeConfig:
        """Probe settings with the task's forced probe kind applied."""
        forced = TASKS[self.eval.task][2]
        if forced and forced != self.probe.kind:
            logger.info(f"Task '{self.eval.task}' uses a {forced} probe")
            return ProbeConfig(**{**self.probe.to_dict(), 'kind': forced}).validate()
        return self.probe

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        unknown = set(data) - set(SECTIONS) - set(SCALARS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: Dict[str, Any] = {k: data[k] for k in SCALARS if k in data}
        for name, section in SECTIONS.items():
            values = data.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"config section '{name}' must be an object")
            allowed = {f.name for f in fields(section)}
            extra = set(values) - allowed
            if extra:
                raise ConfigError(f"unknown {name} keys: {sorted(extra)}")
            try:
                kwargs[name] = section(**values)
            except TypeError as e:
                raise ConfigError(f"invalid {name} section: {e}") from e
        return cls(**kwargs).validate()


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != 'coarse_map':
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_override(text: str) -> Dict[str, Any]:
    """
    Turn `section.key=value` into a nested dict; value is JSON when it parses, else a string.

    Raises:
        ConfigError: On a missing '=' or empty key
    """
    key, sep, raw = text.partition('=')
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split('.')
    nested: Dict[str, Any] = {parts[-1]: value}
    for part in reversed(parts[:-1]):
        nested = {part: nested}
    return nested


def load_config(preset: Optional[str] = 'tiny', config_path: Optional[Union[str, Path]] = None,
                overrides: Sequence[str] = (), seed: Optional[int] = None,
                threads: Optional[int] = None) -> RunConfig:
    """
    Build and validate a RunConfig.

    Args:
        preset: Preset name in configs/, or None for built-in defaults
        config_path: JSON file merged over the preset
        overrides: `dotted.key=value` strings applied last
        seed: Overrides the configured seed
        threads: Overrides the configured thread count

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: On unknown keys or any invalid value
    """
    data: Dict[str, Any] = load_preset(preset) if preset else {}
    if config_path:
        data = deep_merge(data, read_json_object(config_path))
    for text in overrides:
        data = deep_merge(data, parse_override(text))
    if seed is not None:
        data['seed'] = seed
    if threads is not None:
        data['threads'] = threads
    config = RunConfig.from_dict(data)
    logger.debug(f"Config digest {config.digest()}")
    return config


def save_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write('\n')
    return path
