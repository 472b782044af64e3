"""
HMAE Components

This package contains the components of the masked-autoencoder pipeline:
- Tensor / Layers / Optim: reverse-mode autodiff, transformer blocks, AdamW
- ViT-MAE: patching, masking, encoder/decoder, pretraining, attention maps
- Corpus: random crops, quality filter, manifests, stratified splits
- Probe: region embeddings and linear/MLP probes
- Metrics / t-SNE: F1, AUC, repeated runs, reports, 2-D projections
- Checkpoint / Embedding Store: binary persistence formats
"""

from .errors import HmaeError, ValidationError
from .tensor import Tape, Tensor, backward, grad_check
from .vit_mae import MaeModel, Pretrainer, ViTConfig
from .corpus import CorpusManifest, SizeDistribution, generate_corpus, stratified_split
from .probe import EmbeddingRecord, LabelMapping, ProbeConfig, embed_region, predict, train_probe
from .metrics import MetricsReport, auc_ovr, confusion, f1_scores, repeated_runs
from .tsne import Projection2D, tsne

__all__ = [
    'HmaeError',
    'ValidationError',
    'Tape',
    'Tensor',
    'backward',
    'grad_check',
    'MaeModel',
    'Pretrainer',
    'ViTConfig',
    'CorpusManifest',
    'SizeDistribution',
    'generate_corpus',
    'stratified_split',
    'EmbeddingRecord',
    'LabelMapping',
    'ProbeConfig',
    'embed_region',
    'predict',
    'train_probe',
    'MetricsReport',
    'auc_ovr',
    'confusion',
    'f1_scores',
    'repeated_runs',
    'Projection2D',
    'tsne',
]
