"""
ViT-MAE Component

Vision Transformer encoder, random patch masking, lightweight decoder with mask
tokens, and the masked-reconstruction objective used for self-supervised
pretraining. Also extracts CLS attention heatmaps from the final encoder block.
"""

import math
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from components.errors import ConfigError, DimensionError, GeometryError, ParameterError, TrainingError
from components.layers import Linear, LayerNorm, Module, TransformerBlock
from components.optim import AdamW, cosine_lr
from components.tensor import Tape, Tensor, add, backward, concat, mse, scale, take
from utils import rng as rngs
from utils.image_io import to_unit, write_gray

logger = logging.getLogger(__name__)


def round_half_away(x: float) -> int:
    """Round to nearest integer, halves away from zero."""
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


@dataclass
class ViTConfig:
    """Encoder/decoder geometry and pretraining objective switches."""
    input_size: int = 224
    patch_size: int = 16
    channels: int = 3
    encoder_dim: int = 384
    encoder_depth: int = 12
    encoder_heads: int = 6
    decoder_dim: int = 192
    decoder_depth: int = 2
    decoder_heads: int = 4
    mlp_ratio: float = 4.0
    mask_ratio: float = 0.75
    use_cls_token: bool = True
    loss_on_all_patches: bool = False
    norm_pix_loss: bool = False

    @property
    def grid_size(self) -> int:
        return self.input_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @property
    def num_masked(self) -> int:
        return round_half_away(self.mask_ratio * self.num_patches)

    def validate(self) -> 'ViTConfig':
        if self.channels != 3:
            raise GeometryError(f"images are RGB: channels must be 3, got {self.channels}")
        if self.patch_size < 1 or self.input_size < 1 or self.input_size % self.patch_size:
            raise ConfigError(f"input_size {self.input_size} is not divisible by patch_size {self.patch_size}")
        for part in ('encoder', 'decoder'):
            dim, heads = getattr(self, f'{part}_dim'), getattr(self, f'{part}_heads')
            if heads < 1 or dim % heads:
                raise ConfigError(f"{part}_dim {dim} is not divisible by {part}_heads {heads}")
            if dim % 4:
                raise ConfigError(f"{part}_dim {dim} must be divisible by 4 for 2-D sin-cos positions")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if not 1 <= self.num_masked <= self.num_patches - 1:
            raise ConfigError(
                f"mask_ratio {self.mask_ratio} over {self.num_patches} patches leaves no visible or no masked patch")
        if self.mlp_ratio <= 0 or self.encoder_depth < 1 or self.decoder_depth < 0:
            raise ConfigError("mlp_ratio must be > 0, encoder_depth >= 1, decoder_depth >= 0")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ViTConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass
class PatchGrid:
    """Row-major sequence of flattened (channel-last) patches."""
    grid_h: int
    grid_w: int
    patch_size: int
    channels: int
    patches: Tensor

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels


@dataclass
class MaskPlan:
    """Partition of patch indices into encoder-visible and masked sets."""
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    seed: Optional[int] = None

    @property
    def num_patches(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)


def patchify(image: np.ndarray, patch_size: int, input_size: Optional[int] = None) -> PatchGrid:
    """
    Split a square [H, W, C] image into non-overlapping patches.

    Args:
        image: Pixel array, float (any range) or uint8
        patch_size: Patch side in pixels
        input_size: Expected side; checked when given

    Returns:
        PatchGrid with patches of shape [num_patches, patch_size**2 * C]
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise GeometryError(f"expected an [H, W, C] image, got shape {image.shape}")
    h, w, c = image.shape
    if h != w or (input_size is not None and h != input_size):
        raise GeometryError(f"image is {h}x{w}, expected a square of side {input_size or h}")
    if patch_size < 1 or h % patch_size:
        raise GeometryError(f"image side {h} is not divisible by patch_size {patch_size}")
    g = h // patch_size
    patches = image.reshape(g, patch_size, g, patch_size, c).transpose(0, 2, 1, 3, 4).reshape(g * g, -1)
    dtype = np.float64 if patches.dtype == np.float64 else np.float32
    return PatchGrid(g, g, patch_size, c, Tensor(patches, dtype=dtype))


def unpatchify(grid: PatchGrid) -> np.ndarray:
    """Exact inverse of patchify."""
    data = grid.patches.data
    p, c = grid.patch_size, grid.channels
    if data.shape != (grid.num_patches, grid.patch_dim):
        raise DimensionError(f"patch tensor {data.shape} does not match a {grid.grid_h}x{grid.grid_w} grid "
                             f"of {p}px patches with {c} channels")
    return data.reshape(grid.grid_h, grid.grid_w, p, p, c).transpose(0, 2, 1, 3, 4).reshape(
        grid.grid_h * p, grid.grid_w * p, c)


def sincos_pos_embed(grid_h: int, grid_w: int, dim: int) -> Tensor:
    """
    Fixed 2-D sin-cos positional table.

    The first half of each row encodes the patch row, the second half the
    column; each half is [sin(pos * omega), cos(pos * omega)].
    """
    if dim % 4:
        raise ParameterError(f"positional dim {dim} must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows, cols = np.meshgrid(np.arange(grid_h, dtype=np.float64), np.arange(grid_w, dtype=np.float64),
                             indexing='ij')

    def axis_embed(pos):
        angles = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    return Tensor(np.concatenate([axis_embed(rows), axis_embed(cols)], axis=1))


def random_mask(num_patches: int, mask_ratio: float, rng: np.random.Generator,
                seed: Optional[int] = None) -> MaskPlan:
    """
    Draw masked patches uniformly without replacement.

    Args:
        num_patches: Patches in the grid
        mask_ratio: Fraction to hide, in (0, 1)
        rng: Random generator (one per image)
        seed: Recorded in the plan for traceability

    Returns:
        MaskPlan with round(mask_ratio * num_patches) masked indices
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ParameterError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    num_masked = round_half_away(mask_ratio * num_patches)
    if not 1 <= num_masked <= num_patches - 1:
        raise ParameterError(f"mask_ratio {mask_ratio} over {num_patches} patches gives {num_masked} masked")
    order = rng.permutation(num_patches)
    return MaskPlan(np.sort(order[num_masked:]), np.sort(order[:num_masked]), seed)


def full_visibility(num_patches: int) -> MaskPlan:
    """Plan with nothing masked (inference and attention maps)."""
    return MaskPlan(np.arange(num_patches), np.zeros(0, dtype=np.int64))


class MaeModel(Module):
    """Masked autoencoder: ViT encoder over visible patches, transformer decoder over all."""

    def __init__(self, config: ViTConfig, seed: int = 0):
        """
        Initialize weights deterministically from the seed.

        Args:
            config: Validated model geometry
            seed: Base seed for parameter initialization
        """
        config.validate()
        self.config = config
        rng = rngs.stream(seed, rngs.MODEL_INIT)
        g = config.grid_size

        self.patch_embed = Linear(config.patch_dim, config.encoder_dim, rng)
        if config.use_cls_token:
            self.cls_token = Tensor(rng.normal(0.0, 0.02, (1, config.encoder_dim)), requires_grad=True)
        self.pos_embed = sincos_pos_embed(g, g, config.encoder_dim)
        self.blocks = [TransformerBlock(config.encoder_dim, config.encoder_heads, config.mlp_ratio, rng)
                       for _ in range(config.encoder_depth)]
        self.norm = LayerNorm(config.encoder_dim)

        self.decoder_embed = Linear(config.encoder_dim, config.decoder_dim, rng)
        self.mask_token = Tensor(rng.normal(0.0, 0.02, (1, config.decoder_dim)), requires_grad=True)
        self.decoder_pos_embed = sincos_pos_embed(g, g, config.decoder_dim)
        self.decoder_blocks = [TransformerBlock(config.decoder_dim, config.decoder_heads, config.mlp_ratio, rng)
                               for _ in range(config.decoder_depth)]
        self.decoder_norm = LayerNorm(config.decoder_dim)
        self.decoder_pred = Linear(config.decoder_dim, config.patch_dim, rng)

    def encoder_parameters(self) -> Dict[str, Tensor]:
        return {name: p for name, p in self.named_parameters().items()
                if not name.startswith(('decoder_', 'mask_token'))}

    def decoder_tokens(self, latents: Tensor, plan: MaskPlan) -> Tuple[Optional[Tensor], Tensor]:
        """
        Project latents to decoder width and scatter them back into patch order,
        with the mask token at every masked index. No positions added yet.

        Returns:
            (CLS row or None, Tensor[num_patches x decoder_dim])
        """
        cls = 1 if self.config.use_cls_token else 0
        visible = np.asarray(plan.visible_idx, dtype=np.int64)
        masked = np.asarray(plan.masked_idx, dtype=np.int64)
        if latents.shape[0] != len(visible) + cls:
            raise DimensionError(f"latents have {latents.shape[0]} rows, plan expects {len(visible) + cls}")
        y = self.decoder_embed(latents)
        cls_row = None
        if cls:
            cls_row = take(y, [0])
            y = take(y, np.arange(1, y.shape[0]))
        restore = np.empty(plan.num_patches, dtype=np.int64)
        restore[visible] = np.arange(len(visible))
        restore[masked] = len(visible)
        return cls_row, take(concat([y, self.mask_token]), restore)


def _check_plan(plan: MaskPlan, num_patches: int):
    idx = np.concatenate([np.asarray(plan.visible_idx), np.asarray(plan.masked_idx)]).astype(np.int64)
    if idx.size != num_patches or (idx.size and (idx.min() < 0 or idx.max() >= num_patches)):
        raise DimensionError(f"mask plan indices do not cover 0..{num_patches - 1}")
    if np.unique(idx).size != idx.size:
        raise DimensionError("mask plan visible and masked sets overlap")


def encode_visible(model: MaeModel, grid: PatchGrid, plan: MaskPlan) -> Tensor:
    """
    Encode the visible patches.

    Returns:
        Tensor[(V + 1 if CLS) x encoder_dim], CLS row first
    """
    config = model.config
    if grid.num_patches != config.num_patches or grid.patch_dim != config.patch_dim:
        raise DimensionError(f"grid of {grid.num_patches}x{grid.patch_dim} does not match model "
                             f"{config.num_patches}x{config.patch_dim}")
    _check_plan(plan, grid.num_patches)
    visible = np.asarray(plan.visible_idx, dtype=np.int64)
    x = add(model.patch_embed(take(grid.patches, visible)), take(model.pos_embed, visible))
    if config.use_cls_token:
        x = concat([model.cls_token, x])
    for block in model.blocks:
        x = block(x)
    return model.norm(x)


def decode_full(model: MaeModel, latents: Tensor, plan: MaskPlan) -> PatchGrid:
    """Reconstruct every patch (in original patch order) from visible latents."""
    config = model.config
    _check_plan(plan, config.num_patches)
    cls_row, tokens = model.decoder_tokens(latents, plan)
    x = add(tokens, model.decoder_pos_embed)
    if cls_row is not None:
        x = concat([cls_row, x])
    for block in model.decoder_blocks:
        x = block(x)
    x = model.decoder_pred(model.decoder_norm(x))
    if cls_row is not None:
        x = take(x, np.arange(1, x.shape[0]))
    g = config.grid_size
    return PatchGrid(g, g, config.patch_size, config.channels, x)


def normalize_patches(patches: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-patch zero mean, unit variance targets."""
    mu = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mu) / np.sqrt(var + eps)


def mae_loss(pred: PatchGrid, target: PatchGrid, plan: MaskPlan,
             loss_on_all_patches: bool = False, norm_pix_loss: bool = False) -> Tensor:
    """
    Reconstruction MSE, by default over masked patches only.

    Raises:
        DegenerateInputError: if the masked set is empty and loss is masked-only
    """
    if pred.patches.shape != target.patches.shape:
        raise DimensionError(f"pred {pred.patches.shape} vs target {target.patches.shape}")
    goal = target.patches
    if norm_pix_loss:
        goal = Tensor(normalize_patches(goal.data.astype(np.float64)), dtype=goal.dtype)
    mask = None if loss_on_all_patches else plan.masked_idx
    return mse(pred.patches, goal, mask)


def reconstruct(model: MaeModel, image: np.ndarray, plan: MaskPlan) -> Tensor:
    """Forward pass for one image: returns the scalar loss."""
    config = model.config
    grid = patchify(image, config.patch_size, config.input_size)
    pred = decode_full(model, encode_visible(model, grid, plan), plan)
    return mae_loss(pred, grid, plan, config.loss_on_all_patches, config.norm_pix_loss)


def pretrain_step(model: MaeModel, images: Sequence[np.ndarray], optimizer: AdamW,
                  step: int, seed: int, lr: Optional[float] = None) -> float:
    """
    One optimization step over a batch with a fresh mask per image.

    Args:
        model: Model, updated in place
        images: Float images in [0, 1], each input_size x input_size x channels
        optimizer: AdamW bound to model.named_parameters()
        step: Global step index (keys the mask streams)
        seed: Run seed
        lr: Learning rate for this step

    Returns:
        Mean batch loss

    Raises:
        TrainingError: If the loss is not finite
    """
    config = model.config
    lr = optimizer.state.lr if lr is None else lr
    with Tape():
        losses = []
        for i, image in enumerate(images):
            plan = random_mask(config.num_patches, config.mask_ratio, rngs.stream(seed, rngs.MASKING, step, i))
            losses.append(reconstruct(model, image, plan))
        total = losses[0]
        for loss in losses[1:]:
            total = add(total, loss)
        total = scale(total, 1.0 / len(losses))

    value = total.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {step} (lr={lr:.3e})")
    backward(total)
    optimizer.step(lr)
    optimizer.zero_grad()
    return value


class Pretrainer:
    """Drives pretraining over a fixed image set with a warmup-cosine schedule."""

    def __init__(self, model: MaeModel, lr: float = 1.5e-4, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.05, warmup_steps: int = 0, total_steps: int = 1000,
                 min_lr: float = 0.0, batch_size: int = 8, seed: int = 0, log_every: int = 10):
        self.model = model
        self.optimizer = AdamW(model.named_parameters(), lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        self.base_lr = lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.min_lr = min_lr
        self.batch_size = batch_size
        self.seed = seed
        self.log_every = log_every
        self.step = 0

    def learning_rate(self, step: int) -> float:
        return cosine_lr(step, self.base_lr, self.total_steps, self.warmup_steps, self.min_lr)

    def sample_batch(self, images: Sequence[np.ndarray], step: int) -> List[np.ndarray]:
        if len(images) <= self.batch_size:
            return list(images)
        picks = rngs.stream(self.seed, rngs.BATCHING, step).choice(len(images), self.batch_size, replace=False)
        return [images[i] for i in np.sort(picks)]

    def train(self, images: Sequence[np.ndarray], steps: Optional[int] = None,
              loss_log: Optional[Union[str, Path]] = None) -> List[float]:
        """
        Run steps until the schedule (or `steps` more steps) is done.

        Args:
            images: Float images in [0, 1]
            steps: Number of steps to run now; defaults to the remaining schedule
            loss_log: CSV file receiving `step,loss,lr` lines (appended)

        Returns:
            Loss per step run
        """
        if not images:
            raise ParameterError("pretraining needs at least one image")
        end = self.total_steps if steps is None else self.step + steps
        losses = []
        log = None
        if loss_log is not None:
            path = Path(loss_log)
            fresh = not path.exists()
            log = open(path, 'a', encoding='utf-8', newline='\n')
            if fresh:
                log.write('step,loss,lr\n')
        try:
            while self.step < end:
                lr = self.learning_rate(self.step)
                loss = pretrain_step(self.model, self.sample_batch(images, self.step), self.optimizer,
                                     self.step, self.seed, lr)
                losses.append(loss)
                if log is not None:
                    log.write(f"{self.step},{loss!r},{lr!r}\n")
                if self.log_every and (self.step % self.log_every == 0 or self.step == end - 1):
                    logger.info(f"step {self.step}: loss {loss:.5f} lr {lr:.2e}")
                self.step += 1
        finally:
            if log is not None:
                log.close()
        return losses


def encode_patch_tokens(model: MaeModel, image: np.ndarray) -> np.ndarray:
    """Full-visibility encoding of one image; returns patch-token rows (CLS dropped)."""
    config = model.config
    if image.dtype == np.uint8:
        image = to_unit(image)
    grid = patchify(image, config.patch_size, config.input_size)
    out = encode_visible(model, grid, full_visibility(grid.num_patches)).data
    return out[1:] if config.use_cls_token else out


@dataclass
class AttentionMaps:
    """CLS-to-patch attention of the final encoder block."""
    weights: np.ndarray     # [heads, tokens, tokens]
    per_head: np.ndarray    # [heads, grid, grid]
    mean: np.ndarray        # [grid, grid]


def attention_maps(model: MaeModel, image: np.ndarray) -> AttentionMaps:
    """
    Run an unmasked forward pass and read the last block's CLS attention.

    Raises:
        ConfigError: if the model has no CLS token
    """
    config = model.config
    if not config.use_cls_token:
        raise ConfigError("attention maps need a model with use_cls_token=true")
    encode_patch_tokens(model, image)
    weights = model.blocks[-1].attn.last_attention
    g = config.grid_size
    per_head = weights[:, 0, 1:].reshape(weights.shape[0], g, g)
    return AttentionMaps(weights, per_head, per_head.mean(axis=0))


def heatmap_pixels(values: np.ndarray, size: int) -> np.ndarray:
    """Min-max scale a grid to [0, 255] and upscale (nearest neighbour) to size x size."""
    values = values.astype(np.float64)
    lo, hi = values.min(), values.max()
    scaled = np.zeros_like(values) if hi <= lo else (values - lo) / (hi - lo)
    pixels = np.rint(scaled * 255.0).astype(np.uint8)
    factor = size // values.shape[0]
    return np.repeat(np.repeat(pixels, factor, axis=0), factor, axis=1)


def export_attention(maps: AttentionMaps, out_dir: Union[str, Path], input_size: int, fmt: str = 'png') -> List[Path]:
    """Write one heatmap per head plus the head mean; returns the written paths."""
    out_dir = Path(out_dir)
    paths = []
    for head, grid in enumerate(maps.per_head):
        paths.append(out_dir / f"head_{head:02d}.{fmt}")
        write_gray(paths[-1], heatmap_pixels(grid, input_size))
    paths.append(out_dir / f"mean.{fmt}")
    write_gray(paths[-1], heatmap_pixels(maps.mean, input_size))
    logger.info(f"Wrote {len(paths)} attention heatmaps to {out_dir}")
    return paths
