"""Pixel metrics, F-measure, ROC/PR curves, AUC and OTSU thresholding."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

BETA2 = 0.3
N_BINS = 256


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class Curve:
    kind: str  # "roc": (fpr, tpr); "pr": (recall, precision)
    x: list[float]
    y: list[float]
    thresholds: list[float]

    @property
    def points(self):
        return list(zip(self.x, self.y))


@dataclass
class MetricReport:
    ac: float
    auc: float
    precision: float
    recall: float
    f_measure: float
    curves: dict[str, Curve] = field(default_factory=dict)
    curve_max: dict[str, float] = field(default_factory=dict)
    per_image: list[dict] = field(default_factory=list)

    def scalars(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("ac", "auc", "precision", "recall", "f_measure")}

    def to_dict(self) -> dict:
        d = self.scalars()
        d["curve_max"] = dict(self.curve_max)
        d["curves"] = {k: asdict(c) for k, c in self.curves.items()}
        d["per_image"] = list(self.per_image)
        return d

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def confusion_counts(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, pred.size - tp - fp - fn, fn)


def accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total if c.total else 0.0


def precision(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0


def recall(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0


def f_measure(p: float, r: float, beta2: float = BETA2) -> float:
    denom = beta2 * p + r
    return (1 + beta2) * p * r / denom if denom > 0 else 0.0


def uniform_thresholds(n: int = N_BINS) -> np.ndarray:
    """n thresholds from 1 down to 0, strictly decreasing."""
    if n < 2:
        raise ValueError("need at least two thresholds")
    return np.arange(n - 1, -1, -1) / (n - 1)


def _counts_at(scores: np.ndarray, gts: np.ndarray, thresholds: np.ndarray):
    """Positive predictions are score >= threshold; returns tp, fp arrays per threshold."""
    pos = np.sort(scores[gts])
    neg = np.sort(scores[~gts])
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    return tp, fp, pos.size, neg.size


def _pool(score_maps, gts):
    score_maps, gts = list(score_maps), list(gts)
    if not score_maps or len(score_maps) != len(gts):
        raise ValueError("need a non-empty list of score maps and the same number of masks")
    for s, g in zip(score_maps, gts):
        if np.shape(s) != np.shape(g):
            raise ValueError(f"shape mismatch: {np.shape(s)} vs {np.shape(g)}")
    scores = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in score_maps])
    labels = np.concatenate([np.asarray(g).ravel() > 0 for g in gts])
    return scores, labels


def roc_pr_curves(score_maps, gts, n_thresholds: int = N_BINS, thresholds=None) -> tuple[Curve, Curve]:
    """Pooled ROC (fpr, tpr) and PR (recall, precision) curves.

    Thresholds default to ``n_thresholds`` uniform steps over [0, 1]; pass
    ``thresholds`` (strictly decreasing) to sweep explicit values instead.
    """
    scores, labels = _pool(score_maps, gts)
    th = uniform_thresholds(n_thresholds) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if th.size > 1 and np.any(np.diff(th) >= 0):
        raise ValueError("thresholds must be strictly decreasing")
    tp, fp, n_pos, n_neg = _counts_at(scores, labels, th)
    tpr = tp / n_pos if n_pos else np.zeros_like(tp, dtype=float)
    fpr = fp / n_neg if n_neg else np.zeros_like(fp, dtype=float)
    prec = np.divide(tp, tp + fp, out=np.zeros(tp.shape, dtype=float), where=(tp + fp) > 0)
    th_list = th.tolist()
    roc = Curve("roc", fpr.tolist(), tpr.tolist(), th_list)
    pr = Curve("pr", tpr.tolist(), prec.tolist(), th_list)
    return roc, pr


def auc(curve: Curve) -> float:
    """Trapezoidal area under an ROC curve, closed with (0, 0) and (1, 1)."""
    if curve.kind != "roc" or len(curve.x) < 2 or len(curve.x) != len(curve.y):
        raise ValueError("auc needs an ROC curve with at least two points")
    x = np.concatenate([[0.0], np.asarray(curve.x, dtype=np.float64), [1.0]])
    y = np.concatenate([[0.0], np.asarray(curve.y, dtype=np.float64), [1.0]])
    if np.any((x < 0) | (x > 1) | (y < 0) | (y > 1)):
        raise ValueError("ROC points must lie in the unit square")
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def otsu_threshold(saliency) -> float:
    """OTSU threshold on a 256-bin histogram of a [0, 1] map.

    Bin ``b`` holds values in [b/256, (b+1)/256). Candidate ``k`` puts bins
    ``< k`` in the background class, so the returned threshold ``k/256``
    binarises with ``value >= threshold``. Ties go to the lowest ``k``;
    maps with no admissible split return 0.5.
    """
    levels = np.minimum(np.floor(np.asarray(saliency, dtype=np.float64) * N_BINS), N_BINS - 1).astype(np.int64)
    hist = np.bincount(levels.ravel(), minlength=N_BINS)
    n_cum = np.cumsum(hist)
    s_cum = np.cumsum(hist * np.arange(N_BINS))
    n_tot, s_tot = int(n_cum[-1]), int(s_cum[-1])
    best, best_k = Fraction(0), None
    for k in range(1, N_BINS):
        n0, s0 = int(n_cum[k - 1]), int(s_cum[k - 1])
        n1, s1 = n_tot - n0, s_tot - s0
        if n0 == 0 or n1 == 0:
            continue
        # between-class variance up to the constant factor 1/n_tot^2
        var = Fraction((s0 * n1 - s1 * n0) ** 2, n0 * n1)
        if var > best:
            best, best_k = var, k
    return 0.5 if best_k is None else best_k / N_BINS


def otsu_binarize(saliency) -> np.ndarray:
    return (np.asarray(saliency) >= otsu_threshold(saliency)).astype(np.uint8)


def mean_f_measure(preds, gts, beta2: float = BETA2) -> float:
    """Mean of per-image F-measures."""
    fs = []
    for p, g in zip(preds, gts):
        c = confusion_counts(p, g)
        fs.append(f_measure(precision(c), recall(c), beta2))
    return float(np.mean(fs)) if fs else 0.0


def evaluate_maps(score_maps, gts, ids=None, n_thresholds: int = N_BINS) -> MetricReport:
    """Table-style report from foreground-probability maps and ground-truth masks.

    AC/P/R/F pool pixel counts over OTSU-binarised maps; AUC comes from the
    pooled ROC. ``curve_max`` holds the best F along the PR curve.
    """
    score_maps = [np.asarray(s, dtype=np.float64) for s in score_maps]
    gts = [np.asarray(g) for g in gts]
    ids = list(ids) if ids is not None else [str(i) for i in range(len(score_maps))]
    total = ConfusionCounts()
    per_image = []
    for sid, s, g in zip(ids, score_maps, gts):
        th = otsu_threshold(s)
        c = confusion_counts(s >= th, g)
        total = total + c
        p, r = precision(c), recall(c)
        per_image.append({"id": sid, "otsu": th, "ac": accuracy(c), "precision": p, "recall": r,
                          "f_measure": f_measure(p, r), **asdict(c)})
    roc, pr = roc_pr_curves(score_maps, gts, n_thresholds)
    p, r = precision(total), recall(total)
    fs = [f_measure(pp, rr) for rr, pp in zip(pr.x, pr.y)]
    best = int(np.argmax(fs))
    return MetricReport(
        ac=accuracy(total), auc=auc(roc), precision=p, recall=r, f_measure=f_measure(p, r),
        curves={"roc": roc, "pr": pr},
        curve_max={"f_measure": fs[best], "precision": pr.y[best], "recall": pr.x[best],
                   "threshold": pr.thresholds[best]},
        per_image=per_image,
    )
