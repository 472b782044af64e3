"""
Metrics Component

Confusion matrices, per-class/macro/weighted F1, macro one-vs-rest AUC, the
repeated-run protocol (mean and sample std over seeded runs) and JSON report export.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata

from components.errors import DegenerateInputError, DimensionError, MetricsError, ParameterError, RunError

logger = logging.getLogger(__name__)

HEADLINE_METRICS = ('f1_macro', 'f1_weighted', 'auc_ovr')


@dataclass
class ConfusionMatrix:
    """Counts indexed [true][predicted]."""
    counts: np.ndarray
    classes: List[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def to_list(self) -> List[List[int]]:
        return self.counts.astype(int).tolist()


@dataclass
class F1Scores:
    per_class: np.ndarray
    macro: float
    weighted: float
    zero_division: List[int] = field(default_factory=list)


@dataclass
class AucResult:
    macro: float
    per_class: Dict[int, float]
    skipped: List[int] = field(default_factory=list)


@dataclass
class RunMetrics:
    """Metrics of one split/train/evaluate run."""
    f1_per_class: np.ndarray
    f1_macro: float
    f1_weighted: float
    auc_ovr: Optional[float]
    confusion: ConfusionMatrix
    zero_division: List[int] = field(default_factory=list)
    auc_skipped: List[int] = field(default_factory=list)


@dataclass
class MetricSummary:
    mean: float
    std: Optional[float] = None

    def format(self, digits: int = 3) -> str:
        if self.std is None:
            return f"{self.mean:.{digits}f}"
        return f"{self.mean:.{digits}f}±{self.std:.{digits}f}"

    def to_dict(self) -> Dict[str, float]:
        out = {'mean': self.mean}
        if self.std is not None:
            out['std'] = self.std
        return out


@dataclass
class MetricsReport:
    """Aggregate of repeated runs, serialized with to_dict()."""
    task: str
    classes: List[str]
    runs: int
    seeds: List[int]
    f1_per_class: List[MetricSummary]
    f1_macro: MetricSummary
    f1_weighted: MetricSummary
    auc_ovr: Optional[MetricSummary]
    confusion_last_run: ConfusionMatrix
    headline: str = 'f1_macro'
    config_digest: str = ''
    zero_division_classes: List[str] = field(default_factory=list)
    auc_skipped_classes: List[str] = field(default_factory=list)
    auc_runs: int = 0

    def summary(self, metric: str) -> Optional[MetricSummary]:
        return getattr(self, metric)

    def formatted(self) -> Dict[str, str]:
        out = {name: self.summary(name).format() for name in HEADLINE_METRICS if self.summary(name) is not None}
        for name, s in zip(self.classes, self.f1_per_class):
            out[f"f1[{name}]"] = s.format()
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            'task': self.task,
            'classes': list(self.classes),
            'runs': self.runs,
            'auc_runs': self.auc_runs,
            'metrics': {
                'f1_per_class': [s.to_dict() for s in self.f1_per_class],
                'f1_macro': self.f1_macro.to_dict(),
                'f1_weighted': self.f1_weighted.to_dict(),
                'auc_ovr': self.auc_ovr.to_dict() if self.auc_ovr is not None else None,
            },
            'confusion_last_run': self.confusion_last_run.to_list(),
            'config_digest': self.config_digest,
            'headline': self.headline,
            'formatted': self.formatted(),
            'seeds': list(self.seeds),
            'conventions': {
                'std': 'sample standard deviation over runs (n-1); omitted when runs == 1',
                'auc': 'macro one-vs-rest, Mann-Whitney with half credit for ties; averaged over auc_runs',
                'f1_zero_division': 0,
            },
            'flags': {
                'f1_zero_division_classes': list(self.zero_division_classes),
                'auc_skipped_classes': list(self.auc_skipped_classes),
            },
        }


def _labels(values: Sequence[int], name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ParameterError(f"{name} must hold integer class ids")
        arr = arr.astype(np.int64)
    return arr.astype(np.int64)


def confusion(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int,
              classes: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    """
    Count (true, predicted) pairs.

    Raises:
        DimensionError: On unequal lengths
        ParameterError: On a label outside [0, num_classes)
    """
    t, p = _labels(y_true, 'y_true'), _labels(y_pred, 'y_pred')
    if t.shape != p.shape:
        raise DimensionError(f"y_true has {t.size} labels but y_pred has {p.size}")
    for name, arr in (('y_true', t), ('y_pred', p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ParameterError(f"{name} holds labels outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    names = list(classes) if classes is not None else [str(i) for i in range(num_classes)]
    return ConfusionMatrix(counts, names)


def f1_scores(cm: ConfusionMatrix) -> F1Scores:
    """
    Per-class F1 = 2TP / (2TP + FP + FN), 0 when the denominator is 0.

    Macro is the unweighted mean over all classes; weighted uses class support,
    so zero-support classes get weight 0.
    """
    counts = cm.counts.astype(np.float64)
    if counts.sum() == 0:
        raise DegenerateInputError("f1_scores on an empty confusion matrix")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    per_class = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    zero_division = [int(i) for i in np.flatnonzero(denom == 0)]
    support = counts.sum(axis=1)
    weights = support / support.sum()
    return F1Scores(per_class, float(per_class.mean()), float((per_class * weights).sum()), zero_division)


def auc_ovr(y_true: Sequence[int], scores: np.ndarray) -> AucResult:
    """
    Macro one-vs-rest AUC via the Mann-Whitney statistic (ties get half credit).

    Classes without at least one positive and one negative are skipped and listed.

    Raises:
        MetricsError: If no class is evaluable
    """
    y = _labels(y_true, 'y_true')
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != y.size:
        raise DimensionError(f"scores must be [{y.size}, classes], got {scores.shape}")
    per_class, skipped = {}, []
    for c in range(scores.shape[1]):
        positive = y == c
        n_pos = int(positive.sum())
        n_neg = y.size - n_pos
        if n_pos == 0 or n_neg == 0:
            skipped.append(c)
            continue
        ranks = rankdata(scores[:, c])
        u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
        per_class[c] = float(u / (n_pos * n_neg))
    if not per_class:
        raise MetricsError("AUC undefined: no class has both positive and negative records")
    if skipped:
        logger.warning(f"AUC skipped classes without positives or negatives: {skipped}")
    return AucResult(float(np.mean(list(per_class.values()))), per_class, skipped)


def evaluate_predictions(y_true: Sequence[int], scores: np.ndarray, classes: Sequence[str]) -> RunMetrics:
    """Confusion, F1 family and AUC for one set of predictions (argmax of scores)."""
    scores = np.asarray(scores, dtype=np.float64)
    y_pred = np.argmax(scores, axis=1)
    cm = confusion(y_true, y_pred, len(classes), classes)
    f1 = f1_scores(cm)
    try:
        auc = auc_ovr(y_true, scores)
        auc_value, skipped = auc.macro, auc.skipped
    except MetricsError as e:
        logger.warning(f"{e}")
        auc_value, skipped = None, list(range(len(classes)))
    return RunMetrics(f1.per_class, f1.macro, f1.weighted, auc_value, cm, f1.zero_division, skipped)


def _summarize(values: Sequence[float]) -> MetricSummary:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else None
    return MetricSummary(float(arr.mean()), std)


def repeated_runs(closure: Callable[[int], RunMetrics], n_runs: int, base_seed: int = 0, workers: int = 1,
                  task: str = 'coarse', classes: Optional[Sequence[str]] = None, headline: str = 'f1_macro',
                  config_digest: str = '') -> MetricsReport:
    """
    Run an experiment closure with seeds base_seed .. base_seed + n_runs - 1 and aggregate.

    Args:
        closure: Full split + train + evaluate run for one seed
        n_runs: Number of runs
        base_seed: First seed
        workers: Runs executed concurrently
        task: Task name recorded in the report
        classes: Class names; defaults to the indices
        headline: Metric the task reports first
        config_digest: Digest of the configuration that produced the runs

    Returns:
        MetricsReport with mean and sample std (std omitted for a single run)

    Raises:
        RunError: Wrapping the first failing run's exception, with its index and seed
    """
    if n_runs < 1:
        raise ParameterError(f"n_runs must be >= 1, got {n_runs}")
    if headline not in HEADLINE_METRICS:
        raise ParameterError(f"unknown headline metric {headline!r}")
    seeds = [base_seed + i for i in range(n_runs)]

    def run(index: int) -> RunMetrics:
        try:
            return closure(seeds[index])
        except Exception as e:
            raise RunError(index, seeds[index], e) from e

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(n_runs)))
    else:
        results = [run(i) for i in range(n_runs)]

    num_classes = len(results[0].f1_per_class)
    names = list(classes) if classes is not None else [str(i) for i in range(num_classes)]
    if len(names) != num_classes:
        raise DimensionError(f"{len(names)} class names for {num_classes}-class metrics")
    per_class = np.stack([r.f1_per_class for r in results])
    aucs = [r.auc_ovr for r in results if r.auc_ovr is not None]
    zero_div = sorted({c for r in results for c in r.zero_division})
    auc_skipped = sorted({c for r in results for c in r.auc_skipped})
    report = MetricsReport(
        task=task, classes=names, runs=n_runs, seeds=seeds,
        f1_per_class=[_summarize(per_class[:, c]) for c in range(num_classes)],
        f1_macro=_summarize([r.f1_macro for r in results]),
        f1_weighted=_summarize([r.f1_weighted for r in results]),
        auc_ovr=_summarize(aucs) if aucs else None,
        confusion_last_run=results[-1].confusion,
        headline=headline, config_digest=config_digest,
        zero_division_classes=[names[c] for c in zero_div],
        auc_skipped_classes=[names[c] for c in auc_skipped],
        auc_runs=len(aucs),
    )
    if len(aucs) < n_runs:
        logger.warning(f"AUC undefined in {n_runs - len(aucs)} of {n_runs} runs; its mean covers {len(aucs)} runs")
    logger.info(f"{task}: {n_runs} runs, {headline} {report.summary(headline).format()}")
    return report


def export_report(report: MetricsReport, path: Union[str, Path]) -> Path:
    """Write the report as UTF-8 JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(report.to_dict(), f, indent=2, ensure_ascii=False)
        f.write('\n')
    logger.info(f"Report written to {path}")
    return path


def read_report(path: Union[str, Path]) -> Dict[str, Any]:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)
