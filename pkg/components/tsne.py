"""
t-SNE Component

Exact t-SNE: per-point bandwidths calibrated by binary search to a target
perplexity, symmetrized affinities, Student-t output kernel, early exaggeration
and momentum gradient descent with adaptive gains. Plus CSV/PNG export of the
2-D projection.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageDraw

from components.errors import DegenerateInputError, DimensionError, NumericalError, ParameterError

logger = logging.getLogger(__name__)

# Fixed scatter palette (RGB); unlabeled points are drawn gray.
PALETTE = [
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (23, 190, 207),
]
UNLABELED = (127, 127, 127)


@dataclass
class Projection2D:
    coords: np.ndarray
    perplexity: float
    iterations: int
    kl: float
    kl_at_exaggeration_end: Optional[float] = None


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def conditional_affinities(distances: np.ndarray, perplexity: float, tol: float = 1e-5,
                           max_iter: int = 200) -> np.ndarray:
    """
    Row-stochastic P(j|i) with each row's entropy matched to log(perplexity).

    Args:
        distances: [n, n] squared distances
        perplexity: Target perplexity
        tol: Entropy tolerance (nats)
        max_iter: Binary-search steps per point

    Returns:
        [n, n] conditional affinities with zero diagonal
    """
    n = distances.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n))
    unconverged = 0
    for i in range(n):
        d = np.delete(distances[i], i)
        d = d - d.min()
        beta, lo, hi = 1.0, -np.inf, np.inf
        for _ in range(max_iter):
            w = np.exp(-d * beta)
            total = w.sum()
            entropy = np.log(total) + beta * (d * w).sum() / total
            diff = entropy - target
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = beta / 2.0 if lo == -np.inf else (beta + lo) / 2.0
        else:
            unconverged += 1
        p[i, np.arange(n) != i] = w / total
    if unconverged:
        logger.warning(f"perplexity search did not converge for {unconverged} points")
    return p


def joint_affinities(x: np.ndarray, perplexity: float, tol: float = 1e-5) -> np.ndarray:
    """Symmetrized P = (P(j|i) + P(i|j)) / 2n, renormalized to sum to 1."""
    cond = conditional_affinities(squared_distances(x), perplexity, tol)
    p = (cond + cond.T) / (2.0 * x.shape[0])
    return p / p.sum()


def _student_t(y: np.ndarray):
    num = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(num, 0.0)
    return num, num / num.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-300))).sum())


def tsne(embeddings: np.ndarray, perplexity: float = 30.0, iterations: int = 1000,
         rng: Optional[np.random.Generator] = None, learning_rate: float = 200.0,
         exaggeration: float = 4.0, exaggeration_iters: int = 250, momentum: float = 0.5,
         final_momentum: float = 0.8, min_gain: float = 0.01, max_points: int = 5000) -> Projection2D:
    """
    Project embeddings to 2-D.

    Args:
        embeddings: [n, d] array
        perplexity: Target perplexity; needs n >= 3 * perplexity
        iterations: Gradient steps
        rng: Generator for the initial layout
        learning_rate: Step size
        exaggeration: Factor on P during the first exaggeration_iters steps
        exaggeration_iters: Length of early exaggeration (momentum switches there too)
        momentum: Momentum before the switch
        final_momentum: Momentum after the switch
        min_gain: Floor of the adaptive gains
        max_points: Largest n accepted by the exact algorithm

    Returns:
        Projection2D with the final KL and the KL right after exaggeration ends
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"t-SNE expects [n, d] input, got {x.shape}")
    n = x.shape[0]
    if perplexity <= 0 or n < 3 * perplexity:
        raise ParameterError(f"perplexity {perplexity} is infeasible for {n} points (need n >= 3 * perplexity)")
    if n > max_points:
        raise ParameterError(f"exact t-SNE is limited to {max_points} points, got {n}")
    if iterations < 1:
        raise ParameterError(f"iterations must be >= 1, got {iterations}")
    if not np.all(np.isfinite(x)):
        raise DegenerateInputError("t-SNE input contains non-finite values")
    rng = np.random.default_rng(0) if rng is None else rng

    p = joint_affinities(x, perplexity)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    kl_switch = None
    for it in range(iterations):
        exaggerating = it < exaggeration_iters
        num, q = _student_t(y)
        w = ((exaggeration if exaggerating else 1.0) * p - q) * num
        grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)
        same_sign = (grad > 0) == (update > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, min_gain, out=gains)
        update = (momentum if exaggerating else final_momentum) * update - learning_rate * gains * grad
        y = y + update
        y -= y.mean(axis=0)
        if it + 1 == exaggeration_iters:
            kl_switch = kl_divergence(p, _student_t(y)[1])
            logger.debug(f"t-SNE KL after exaggeration: {kl_switch:.4f}")

    kl = kl_divergence(p, _student_t(y)[1])
    if not np.isfinite(kl) or not np.all(np.isfinite(y)):
        raise NumericalError("t-SNE diverged")
    logger.info(f"t-SNE: {n} points, perplexity {perplexity}, {iterations} iterations, KL {kl:.4f}")
    return Projection2D(y, perplexity, iterations, kl, kl_switch)


def export_projection(proj: Projection2D, ids: Sequence[str], labels: Sequence[Optional[str]],
                      path: Union[str, Path], png_path: Optional[Union[str, Path]] = None,
                      classes: Optional[Sequence[str]] = None, size: int = 512) -> List[Path]:
    """
    Write `id,x,y,label` CSV and, optionally, a PNG scatter colored by class.

    Args:
        proj: Projection
        ids: Record ids, one per row of proj.coords
        labels: Class name per record, None when unlabeled
        path: CSV path
        png_path: Optional scatter PNG
        classes: Class order for palette assignment (defaults to sorted labels)
        size: Scatter canvas side in pixels

    Returns:
        Written paths
    """
    if not (len(ids) == len(labels) == proj.coords.shape[0]):
        raise DimensionError(f"{len(ids)} ids and {len(labels)} labels for {proj.coords.shape[0]} points")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['id', 'x', 'y', 'label'])
        for rid, (x, y), label in zip(ids, proj.coords, labels):
            writer.writerow([rid, repr(float(x)), repr(float(y)), '' if label is None else label])
    written = [path]
    if png_path is not None:
        written.append(render_scatter(proj.coords, labels, png_path, classes, size))
    return written


def render_scatter(coords: np.ndarray, labels: Sequence[Optional[str]], path: Union[str, Path],
                   classes: Optional[Sequence[str]] = None, size: int = 512, radius: int = 3) -> Path:
    classes = list(classes) if classes is not None else sorted({l for l in labels if l is not None})
    colors = {name: PALETTE[i % len(PALETTE)] for i, name in enumerate(classes)}
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    margin = 2 * radius + 4
    pixels = margin + (coords - lo) / span * (size - 2 * margin)
    image = Image.new('RGB', (size, size), (255, 255, 255))
    draw = ImageDraw.Draw(image)
    for (px, py), label in zip(pixels, labels):
        color = colors.get(label, UNLABELED)
        draw.ellipse([px - radius, size - py - radius, px + radius, size - py + radius], fill=color)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path, format='PNG')
    return path


def read_projection(path: Union[str, Path]) -> List[dict]:
    with open(path, 'r', encoding='utf-8', newline='') as f:
        return [{'id': row['id'], 'x': float(row['x']), 'y': float(row['y']), 'label': row['label'] or None}
                for row in csv.DictReader(f)]
