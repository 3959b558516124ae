"""Voxel-wise and lesion-wise segmentation metrics plus comparison statistics.

All lesion counting uses 18-connectivity (face and edge neighbours, no
corner-only neighbours). Undefined values (empty reference for TPR, LTPR and
RVE) are returned as ``nan`` and dropped from aggregates with a warning.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

STRUCTURE_18 = ndimage.generate_binary_structure(3, 2)

HIGHER_IS_BETTER = {"dsc": True, "tpr": True, "ltpr": True, "lfdr": False, "rve": False}
METRIC_NAMES = tuple(HIGHER_IS_BETTER)


class UndefinedMetricWarning(UserWarning):
    pass


@dataclass
class MetricsConfig:
    t_iou: float = 0.05
    bootstrap_resamples: int = 2000
    alpha: float = 0.05
    n_methods: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.t_iou <= 1.0:
            raise ValueError(f"t_iou must lie in (0, 1], got {self.t_iou}")


@dataclass
class LesionStats:
    """Connected components of a binary mask.

    ``labels`` holds component ids 1..n (0 is background); ``volumes[k]`` is the
    voxel count of component ``k + 1``.
    """

    labels: np.ndarray
    volumes: np.ndarray

    @property
    def count(self) -> int:
        return int(self.volumes.size)

    def voxels(self, lesion_id: int) -> np.ndarray:
        return np.argwhere(self.labels == lesion_id)


def label_components(mask: np.ndarray) -> LesionStats:
    mask = np.asarray(mask).astype(bool)
    labels, n = ndimage.label(mask, structure=STRUCTURE_18)
    volumes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return LesionStats(labels=labels, volumes=volumes)


def _counts(pred: np.ndarray, ref: np.ndarray) -> tuple[int, int, int]:
    pred = np.asarray(pred).astype(bool)
    ref = np.asarray(ref).astype(bool)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    tp = int(np.count_nonzero(pred & ref))
    fp = int(np.count_nonzero(pred & ~ref))
    fn = int(np.count_nonzero(~pred & ref))
    return tp, fp, fn


def dsc(pred: np.ndarray, ref: np.ndarray) -> float:
    """Hard Dice; two empty masks score 1."""
    tp, fp, fn = _counts(pred, ref)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def tpr(pred: np.ndarray, ref: np.ndarray) -> float:
    tp, _, fn = _counts(pred, ref)
    if tp + fn == 0:
        warnings.warn("TPR undefined for an empty reference", UndefinedMetricWarning)
        return math.nan
    return tp / (tp + fn)


@dataclass
class LesionMatch:
    ltp: int
    lfp: int
    n_ref: int
    n_pred: int
    iou: np.ndarray = field(repr=False)  # shape (n_pred, n_ref)


def pairwise_iou(pred_stats: LesionStats, ref_stats: LesionStats) -> np.ndarray:
    """IoU between every predicted and every reference component."""
    n_p, n_r = pred_stats.count, ref_stats.count
    if n_p == 0 or n_r == 0:
        return np.zeros((n_p, n_r))
    pl = pred_stats.labels.ravel()
    rl = ref_stats.labels.ravel()
    both = (pl > 0) & (rl > 0)
    inter = np.zeros((n_p + 1, n_r + 1), dtype=np.int64)
    np.add.at(inter, (pl[both], rl[both]), 1)
    inter = inter[1:, 1:]
    union = pred_stats.volumes[:, None] + ref_stats.volumes[None, :] - inter
    return inter / union


def lesion_match(pred_stats: LesionStats, ref_stats: LesionStats, t_iou: float = 0.05) -> LesionMatch:
    """Lesion-level detection counts.

    A reference lesion is detected when any predicted lesion reaches IoU >= t_iou
    with it; a predicted lesion is a false positive when its IoU is below t_iou
    for every reference lesion. One predicted lesion may detect several
    reference lesions.
    """
    iou = pairwise_iou(pred_stats, ref_stats)
    hit = iou >= t_iou
    ltp = int(hit.any(axis=0).sum()) if iou.size else 0
    lfp = int((~hit.any(axis=1)).sum()) if iou.shape[1] else pred_stats.count
    return LesionMatch(ltp=ltp, lfp=lfp, n_ref=ref_stats.count, n_pred=pred_stats.count, iou=iou)


def ltpr(pred: np.ndarray, ref: np.ndarray, t_iou: float = 0.05) -> float:
    m = lesion_match(label_components(pred), label_components(ref), t_iou)
    if m.n_ref == 0:
        warnings.warn("LTPR undefined for an empty reference", UndefinedMetricWarning)
        return math.nan
    return m.ltp / m.n_ref


def lfdr(pred: np.ndarray, ref: np.ndarray, t_iou: float = 0.05) -> float:
    m = lesion_match(label_components(pred), label_components(ref), t_iou)
    if m.n_pred == 0:
        return 0.0
    return m.lfp / m.n_pred


def rve(pred: np.ndarray, ref: np.ndarray) -> float:
    v_pred = int(np.count_nonzero(pred))
    v_ref = int(np.count_nonzero(ref))
    if v_ref == 0:
        warnings.warn("RVE undefined for an empty reference", UndefinedMetricWarning)
        return math.nan
    return abs(v_pred - v_ref) / v_ref


def evaluate_case(pred: np.ndarray, ref: np.ndarray, t_iou: float = 0.05) -> dict[str, float]:
    """All five metrics for one case, sharing a single component labelling."""
    pred = np.asarray(pred).astype(bool)
    ref = np.asarray(ref).astype(bool)
    tp, fp, fn = _counts(pred, ref)
    m = lesion_match(label_components(pred), label_components(ref), t_iou)
    empty_ref = tp + fn == 0
    if empty_ref:
        warnings.warn("empty reference: TPR, LTPR and RVE undefined", UndefinedMetricWarning)
    return {
        "dsc": dsc(pred, ref),
        "tpr": math.nan if empty_ref else tp / (tp + fn),
        "ltpr": math.nan if m.n_ref == 0 else m.ltp / m.n_ref,
        "lfdr": 0.0 if m.n_pred == 0 else m.lfp / m.n_pred,
        "rve": math.nan if empty_ref else abs((tp + fp) - (tp + fn)) / (tp + fn),
        "n_ref_lesions": m.n_ref,
        "n_pred_lesions": m.n_pred,
    }


def classifier_accuracy(posteriors: np.ndarray, true_domains: np.ndarray) -> float:
    """Fraction of argmax-correct domain predictions."""
    posteriors = np.asarray(posteriors)
    true_domains = np.asarray(true_domains)
    if true_domains.size == 0:
        raise ValueError("classifier accuracy of an empty batch is undefined")
    return float(np.mean(posteriors.argmax(axis=1) == true_domains))


@dataclass
class RankTable:
    methods: list[str]
    means: dict[str, dict[str, float]]
    ranks: dict[str, dict[str, float]]
    rs: dict[str, float]


def rank_score(method_means: Mapping[str, Mapping[str, float]], metrics: Sequence[str] = METRIC_NAMES) -> RankTable:
    """Average rank over the metrics; ties share the mean of their positions."""
    methods = list(method_means)
    if len(methods) < 2:
        raise ValueError("rank score needs at least two methods")
    ranks: dict[str, dict[str, float]] = {m: {} for m in methods}
    for metric in metrics:
        try:
            values = np.array([float(method_means[m][metric]) for m in methods])
        except KeyError as exc:
            raise KeyError(f"metric {metric!r} missing for a method") from exc
        if np.isnan(values).any():
            raise ValueError(f"metric {metric!r} is undefined for some method")
        key = -values if HIGHER_IS_BETTER[metric] else values
        for m, r in zip(methods, _average_ranks(key)):
            ranks[m][metric] = float(r)
    rs = {m: float(np.mean([ranks[m][k] for k in metrics])) for m in methods}
    means = {m: {k: float(method_means[m][k]) for k in metrics} for m in methods}
    return RankTable(methods=methods, means=means, ranks=ranks, rs=rs)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ascending ranks with ties averaged."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


EXACT_MAX_N = 25


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are dropped. Tied absolute differences get averaged
    ranks. Up to 25 non-zero pairs the null distribution is enumerated exactly;
    beyond that a normal approximation with tie and continuity correction is
    used. Returns ``(T_plus, p)``; all-zero differences give ``p = 1``.
    """
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 0.0, 1.0
    ranks = _average_ranks(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        # doubled ranks are integers even with ties
        doubled = np.rint(2 * ranks).astype(int)
        total = int(doubled.sum())
        dist = np.zeros(total + 1)
        dist[0] = 1.0
        for r in doubled:
            dist[r:] = dist[r:] + dist[: total + 1 - r]
        dist /= dist.sum()
        t2 = int(round(2 * t_plus))
        lower = dist[: t2 + 1].sum()
        upper = dist[t2:].sum()
        p = min(1.0, 2.0 * min(lower, upper))
    else:
        mean = n * (n + 1) / 4
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - (tie_counts**3 - tie_counts).sum() / 48
        z = (abs(t_plus - mean) - 0.5) / math.sqrt(var)
        p = min(1.0, math.erfc(max(z, 0.0) / math.sqrt(2)))
    return t_plus, float(p)


@dataclass
class Comparison:
    p_raw: float
    p_adjusted: float
    significant: bool
    statistic: float


def compare_methods(a: Sequence[float], b: Sequence[float], cfg: MetricsConfig | None = None) -> Comparison:
    """Paired comparison with Bonferroni adjustment by ``cfg.n_methods``."""
    cfg = cfg or MetricsConfig()
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired comparison needs equal-length vectors")
    keep = ~(np.isnan(a) | np.isnan(b))
    if keep.sum() < 6:
        warnings.warn("fewer than 6 paired cases; test has little power", UndefinedMetricWarning)
    stat, p = wilcoxon_signed_rank(a[keep], b[keep])
    p_adj = min(1.0, p * cfg.n_methods)
    return Comparison(p_raw=p, p_adjusted=p_adj, significant=p_adj < cfg.alpha, statistic=stat)


def bootstrap_ci(values: Sequence[float], resamples: int = 2000, seed: int = 0, level: float = 0.95) -> tuple[float, float, float]:
    """Percentile bootstrap CI of the mean: ``(mean, low, high)``."""
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    if v.size < 2:
        raise ValueError("bootstrap CI needs at least two values")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, v.size, size=(resamples, v.size))
    means = v[idx].mean(axis=1)
    tail = (1.0 - level) / 2 * 100
    low, high = np.percentile(means, [tail, 100 - tail])
    return float(v.mean()), float(low), float(high)


def aggregate(per_case: Sequence[Mapping[str, float]], cfg: MetricsConfig | None = None) -> dict[str, dict[str, float]]:
    """Mean, SD and bootstrap CI per metric, skipping undefined cases."""
    cfg = cfg or MetricsConfig()
    out: dict[str, dict[str, float]] = {}
    for metric in METRIC_NAMES:
        v = np.array([row[metric] for row in per_case], dtype=float)
        n_undef = int(np.isnan(v).sum())
        if n_undef:
            warnings.warn(f"{n_undef} case(s) with undefined {metric} excluded", UndefinedMetricWarning)
        v = v[~np.isnan(v)]
        entry = {"n": int(v.size), "mean": math.nan, "sd": math.nan, "ci_low": math.nan, "ci_high": math.nan}
        if v.size:
            entry["mean"] = float(v.mean())
            entry["sd"] = float(v.std(ddof=1)) if v.size > 1 else 0.0
        if v.size >= 2:
            _, entry["ci_low"], entry["ci_high"] = bootstrap_ci(v, cfg.bootstrap_resamples, cfg.seed)
        out[metric] = entry
    return out
