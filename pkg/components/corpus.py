"""
Corpus Component

Random square-crop extraction from large slide images: side lengths drawn from a
normal distribution fitted to annotated ROI sizes, a coefficient-of-variation
quality filter that drops blank and border regions, resizing to the model input,
manifest IO and stratified train/val/test splitting.
"""

import csv
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from components.errors import (
    CorpusError, DegenerateInputError, GeometryError, ParameterError, SplitError,
)
from utils import rng as rngs
from utils.image_io import read_rgb, write_rgb

logger = logging.getLogger(__name__)

SLIDE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.tif', '.tiff', '.bmp')
MANIFEST_HEADER = ['id', 'path', 'slide', 'x', 'y', 'side', 'cv', 'label', 'split']
SPLITS = ('train', 'val', 'test')
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class SlideImage:
    """An in-memory RGB slide."""
    pixels: np.ndarray
    path: str
    slide_id: str

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'SlideImage':
        path = Path(path)
        return cls(read_rgb(path), str(path), path.stem)

    def region(self, x: int, y: int, side: int) -> np.ndarray:
        return self.pixels[y:y + side, x:x + side]


@dataclass
class SizeDistribution:
    """Normal distribution of crop side lengths with hard clamps, in pixels."""
    mu: float = 256.0
    sigma: float = 64.0
    clamp_min: int = 64
    clamp_max: int = 512

    def validate(self) -> 'SizeDistribution':
        if self.sigma < 0:
            raise ParameterError(f"sigma must be >= 0, got {self.sigma}")
        if not self.clamp_min <= self.mu <= self.clamp_max:
            raise ParameterError(f"need clamp_min <= mu <= clamp_max, got {self.clamp_min} <= {self.mu} "
                                 f"<= {self.clamp_max}")
        return self

    def draw(self, rng: np.random.Generator, redraws: int = 8) -> float:
        """One side length: redraw out-of-clamp values up to `redraws` times, then clamp."""
        side = rng.normal(self.mu, self.sigma)
        for _ in range(redraws):
            if self.clamp_min <= side <= self.clamp_max:
                break
            side = rng.normal(self.mu, self.sigma)
        return float(np.clip(side, self.clamp_min, self.clamp_max))


@dataclass
class CropSpec:
    """Geometry of one candidate region."""
    x: int
    y: int
    side: int
    slide_id: str
    seed: Optional[int] = None
    cv: Optional[float] = None


@dataclass
class QualityResult:
    accepted: bool
    cv: float
    degenerate: bool = False


@dataclass
class ManifestRow:
    region_id: str
    path: str
    slide: str
    x: int
    y: int
    side: int
    cv: float
    label: Optional[str] = None
    split: Optional[str] = None


@dataclass
class CorpusManifest:
    """Table of generated or labeled regions. Paths are relative to `root` when not absolute."""
    rows: List[ManifestRow]
    root: Path = field(default_factory=Path)
    stats: Dict[str, Any] = field(default_factory=dict)

    def resolve(self, row: ManifestRow) -> Path:
        path = Path(row.path)
        return path if path.is_absolute() else self.root / path

    def labels(self) -> List[Optional[str]]:
        return [row.label for row in self.rows]

    def write(self, path: Union[str, Path]) -> Path:
        """Write CSV (UTF-8, LF, empty string for null label/split)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ids = [row.region_id for row in self.rows]
        if len(set(ids)) != len(ids):
            raise CorpusError(f"duplicate region ids in manifest {path}")
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(MANIFEST_HEADER)
            for row in self.rows:
                writer.writerow([row.region_id, row.path, row.slide, row.x, row.y, row.side, repr(float(row.cv)),
                                 row.label or '', row.split or ''])
        return path

    @classmethod
    def read(cls, path: Union[str, Path], allow_duplicates: bool = False) -> 'CorpusManifest':
        """
        Load a manifest CSV.

        Args:
            path: Manifest file
            allow_duplicates: Accept repeated region ids (labeled ROI lists may repeat a region)

        Returns:
            CorpusManifest rooted at the manifest's directory
        """
        path = Path(path)
        rows = []
        with open(path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != MANIFEST_HEADER:
                raise CorpusError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}")
            for line in reader:
                rows.append(ManifestRow(
                    region_id=line['id'], path=line['path'], slide=line['slide'],
                    x=int(line['x']), y=int(line['y']), side=int(line['side']), cv=float(line['cv']),
                    label=line['label'] or None, split=line['split'] or None,
                ))
        ids = [row.region_id for row in rows]
        if not allow_duplicates and len(set(ids)) != len(ids):
            raise CorpusError(f"{path}: region ids are not unique")
        return cls(rows, path.parent)


def slide_files(slides_dir: Union[str, Path]) -> List[Path]:
    """Slide image files in a directory, sorted by file name. A slide's id is its file stem."""
    slides_dir = Path(slides_dir)
    if not slides_dir.is_dir():
        raise CorpusError(f"slides directory not found: {slides_dir}")
    files = sorted(p for p in slides_dir.iterdir() if p.suffix.lower() in SLIDE_EXTENSIONS)
    if not files:
        raise CorpusError(f"no slide images in {slides_dir}")
    return files


def load_slides(slides_dir: Union[str, Path]) -> List[SlideImage]:
    """Load every image in a directory, sorted by file name."""
    files = slide_files(slides_dir)
    logger.info(f"Loading {len(files)} slides from {slides_dir}")
    return [SlideImage.load(p) for p in files]


def read_roi_sizes(path: Union[str, Path]) -> List[float]:
    """Read a single-column CSV of ROI side lengths; a non-numeric first line is a header."""
    sides = []
    with open(path, 'r', encoding='utf-8', newline='') as f:
        for i, line in enumerate(csv.reader(f)):
            if not line or not line[0].strip():
                continue
            try:
                sides.append(float(line[0]))
            except ValueError:
                if i:
                    raise ParameterError(f"{path}:{i + 1}: not a number: {line[0]!r}")
    return sides


def fit_size_distribution(roi_sides: Sequence[float], patch_size: int = 16) -> SizeDistribution:
    """
    Fit crop-size statistics to annotated ROI side lengths.

    Args:
        roi_sides: Side lengths in pixels
        patch_size: Model patch size; crops are never smaller than two patches

    Returns:
        SizeDistribution with sample mean, sample std (n-1) and clamps
        [max(2 * patch_size, p1), p99]
    """
    sides = np.asarray(roi_sides, dtype=np.float64)
    if sides.size < 2:
        raise DegenerateInputError(f"need at least 2 ROI sizes, got {sides.size}")
    mu = float(sides.mean())
    sigma = float(sides.std(ddof=1))
    clamp_min = max(2 * patch_size, int(math.ceil(np.percentile(sides, 1))))
    clamp_max = int(math.floor(np.percentile(sides, 99)))
    if clamp_min > mu:
        raise GeometryError(f"mean ROI side {mu:.1f} is below two patches ({2 * patch_size}px)")
    clamp_max = max(clamp_max, int(math.ceil(mu)))
    logger.info(f"Fitted size distribution: mu={mu:.1f} sigma={sigma:.1f} clamps=[{clamp_min}, {clamp_max}]")
    return SizeDistribution(mu, sigma, clamp_min, clamp_max).validate()


def sample_crop(slide: SlideImage, dist: SizeDistribution, rng: np.random.Generator,
                seed: Optional[int] = None) -> CropSpec:
    """
    Draw a square crop: normal side length, uniform placement.

    Raises:
        GeometryError: If the slide is smaller than clamp_min on either side
    """
    limit = min(slide.width, slide.height)
    if limit < dist.clamp_min:
        raise GeometryError(f"slide {slide.slide_id} ({slide.width}x{slide.height}) is smaller than the "
                            f"minimum crop side {dist.clamp_min}")
    side = int(math.floor(dist.draw(rng) + 0.5))
    side = max(dist.clamp_min, min(side, dist.clamp_max, limit))
    x = int(rng.integers(0, slide.width - side + 1))
    y = int(rng.integers(0, slide.height - side + 1))
    return CropSpec(x, y, side, slide.slide_id, seed)


def luminance(pixels: np.ndarray) -> np.ndarray:
    """Rec.601 luma in float64."""
    return pixels[..., :3].astype(np.float64) @ LUMA_WEIGHTS


def quality_check(pixels: np.ndarray, threshold: float) -> QualityResult:
    """
    Coefficient of variation (std / mean) of luminance; accept iff cv > threshold.

    An all-black crop has mean 0: rejected as degenerate with cv = inf.
    """
    if pixels.size == 0:
        raise DegenerateInputError("quality_check on an empty crop")
    luma = luminance(pixels)
    mu = luma.mean()
    if mu == 0:
        return QualityResult(False, math.inf, True)
    cv = float(luma.std() / mu)
    return QualityResult(cv > threshold, cv)


def resize_bilinear(image: np.ndarray, target_size: Union[int, Tuple[int, int]]) -> np.ndarray:
    """
    Bilinear resize with half-pixel centers and edge clamping.

    Args:
        image: [H, W] or [H, W, C]; uint8 output is rounded and clipped
        target_size: Output side, or (height, width)

    Returns:
        Resized image with the input dtype
    """
    out_h, out_w = (target_size, target_size) if isinstance(target_size, int) else target_size
    if out_h < 2 or out_w < 2:
        raise ParameterError(f"resize target must be at least 2x2, got {out_h}x{out_w}")
    in_h, in_w = image.shape[:2]
    if in_h < 2 or in_w < 2:
        raise GeometryError(f"resize source must be at least 2x2, got {in_h}x{in_w}")
    if (in_h, in_w) == (out_h, out_w):
        return image.copy()

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    data = image.astype(np.float64)
    r0, r1, fr = axis_weights(in_h, out_h)
    c0, c1, fc = axis_weights(in_w, out_w)
    extra = (1,) * (data.ndim - 2)
    fr = fr.reshape((-1, 1) + extra)
    fc = fc.reshape((1, -1) + extra)
    rows = data[r0] * (1 - fr) + data[r1] * fr
    out = rows[:, c0] * (1 - fc) + rows[:, c1] * fc
    if image.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(image.dtype)


def _evaluate_candidate(index: int, slides: Sequence[SlideImage], dist: SizeDistribution,
                        threshold: float, seed: int) -> Tuple[int, CropSpec, QualityResult]:
    rng = rngs.stream(seed, rngs.CROPPING, index)
    slide = slides[int(rng.integers(len(slides)))]
    spec = sample_crop(slide, dist, rng, seed=index)
    result = quality_check(slide.region(spec.x, spec.y, spec.side), threshold)
    spec.cv = result.cv
    return index, spec, result


def generate_corpus(slides: Sequence[SlideImage], dist: SizeDistribution, count: int, threshold: float,
                    seed: int, out_dir: Union[str, Path], input_size: int, workers: int = 1,
                    label_from_slide: bool = False, budget_factor: int = 100) -> CorpusManifest:
    """
    Sample, filter, resize and save `count` regions.

    Candidates are numbered; candidate i draws from its own random stream, so the
    accepted set (the `count` lowest accepted indices) does not depend on `workers`.

    Args:
        slides: Source slides
        dist: Crop side distribution
        count: Regions to accept
        threshold: Minimum coefficient of variation
        seed: Base seed
        out_dir: Directory for images/ and the returned manifest's root
        input_size: Side of the saved (resized) crops
        workers: Threads evaluating candidates
        label_from_slide: Use the slide id as the region label
        budget_factor: Candidates allowed per requested region

    Returns:
        Manifest sorted by region id, with acceptance statistics in .stats

    Raises:
        CorpusError: If the candidate budget runs out first
    """
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    if not slides:
        raise CorpusError("no slides to sample from")
    dist.validate()
    out_dir = Path(out_dir)
    (out_dir / 'images').mkdir(parents=True, exist_ok=True)
    budget = budget_factor * count
    chunk = max(64, count)

    accepted: List[CropSpec] = []
    examined = 0
    degenerate = 0
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        start = 0
        while len(accepted) < count and start < budget:
            indices = range(start, min(start + chunk, budget))
            results = pool.map(lambda i: _evaluate_candidate(i, slides, dist, threshold, seed), indices)
            for index, spec, result in results:
                if len(accepted) >= count:
                    break
                examined = index + 1
                degenerate += result.degenerate
                if result.accepted:
                    accepted.append(spec)
            start += chunk

    rate = len(accepted) / examined if examined else 0.0
    if len(accepted) < count:
        raise CorpusError(f"rejection budget of {budget} candidates exhausted with {len(accepted)}/{count} "
                          f"accepted (acceptance rate {rate:.3f})")
    logger.info(f"Accepted {count} of {examined} candidates (rate {rate:.3f}, {degenerate} all-black)")

    by_id = {slide.slide_id: slide for slide in slides}
    rows = []
    for spec in accepted:
        region_id = f"crop_{spec.seed:08d}"
        pixels = resize_bilinear(by_id[spec.slide_id].region(spec.x, spec.y, spec.side), input_size)
        rel = Path('images') / f"{region_id}.png"
        write_rgb(out_dir / rel, pixels)
        rows.append(ManifestRow(region_id, rel.as_posix(), spec.slide_id, spec.x, spec.y, spec.side, spec.cv,
                                spec.slide_id if label_from_slide else None))
    rows.sort(key=lambda row: row.region_id)
    stats = {'candidates': examined, 'accepted': count, 'acceptance_rate': rate, 'degenerate': degenerate}
    return CorpusManifest(rows, out_dir, stats)


def largest_remainder(total: int, fractions: Sequence[float]) -> List[int]:
    """Integer apportionment of `total` by fractions; ties go to the earlier share."""
    quotas = [total * f for f in fractions]
    counts = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:total - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_assign(labels: Sequence[Any], fractions: Sequence[float], rng: np.random.Generator,
                      names: Sequence[str] = SPLITS) -> List[str]:
    """
    Per-class proportional split tags, in input order.

    Raises:
        SplitError: On a missing label or a class with fewer than 3 members
    """
    if len(fractions) != len(names) or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ParameterError(f"split fractions must be {len(names)} non-negative values summing to 1, "
                             f"got {tuple(fractions)}")
    if any(label is None for label in labels):
        raise SplitError("every row needs a label before splitting")
    members: Dict[Any, List[int]] = {}
    for i, label in enumerate(labels):
        members.setdefault(label, []).append(i)
    tags: List[Optional[str]] = [None] * len(labels)
    for label in sorted(members, key=str):
        idx = members[label]
        if len(idx) < 3:
            raise SplitError(f"class {label!r} has {len(idx)} members; at least 3 are needed")
        shuffled = [idx[j] for j in rng.permutation(len(idx))]
        cursor = 0
        for name, n in zip(names, largest_remainder(len(idx), fractions)):
            for i in shuffled[cursor:cursor + n]:
                tags[i] = name
            cursor += n
    return tags


def stratified_split(rows: Sequence[ManifestRow], fractions: Sequence[float] = (0.7, 0.1, 0.2),
                     rng: Optional[np.random.Generator] = None, seed: int = 0) -> List[ManifestRow]:
    """Tag labeled manifest rows with train/val/test, per class."""
    rng = rngs.stream(seed, rngs.SPLITTING) if rng is None else rng
    tags = stratified_assign([row.label for row in rows], fractions, rng)
    return [replace(row, split=tag) for row, tag in zip(rows, tags)]
