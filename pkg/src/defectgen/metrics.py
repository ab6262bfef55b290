"""Anomaly-localization metrics: Pixel-AUC, PRO, AP, IAP and IAP@k.

All metrics are rank statistics of the score map: thresholds sweep the
distinct score values (ties grouped), so every metric is invariant under
strictly increasing transforms of the scores.  Ground-truth connected
components use 4-connectivity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import UndefinedMetricError

CONNECTIVITY = 4
DEFAULT_FPR_LIMIT = 0.3
DEFAULT_K = 90
INSTANCE_PIXEL_FRACTION = 0.5


@dataclass
class GroundTruth:
    """Binary labels plus cached 4-connected components.

    ``labels`` is a flat boolean array; ``components`` lists, per anomaly
    region, the flat indices of its pixels.  The components partition the
    positive pixels.
    """

    labels: np.ndarray
    components: list[np.ndarray]

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "GroundTruth":
        mask = np.asarray(mask).astype(bool)
        lab, n = ndimage.label(mask)  # default structure = 4-connectivity
        flat = lab.ravel()
        comps = [np.flatnonzero(flat == i) for i in range(1, n + 1)]
        return cls(labels=mask.ravel(), components=comps)

    @classmethod
    def concat(cls, parts: list["GroundTruth"]) -> "GroundTruth":
        """Stack per-image ground truths; components never merge across images."""
        labels = np.concatenate([p.labels for p in parts])
        comps: list[np.ndarray] = []
        offset = 0
        for p in parts:
            comps.extend(c + offset for c in p.components)
            offset += p.labels.size
        return cls(labels=labels, components=comps)


def _as_flat(s: np.ndarray, g: GroundTruth) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64).ravel()
    if s.size != g.labels.size:
        raise UndefinedMetricError(
            f"score size {s.size} != label size {g.labels.size}"
        )
    if not np.all(np.isfinite(s)):
        raise UndefinedMetricError("score map contains non-finite values")
    return s


def pixel_auc(s: np.ndarray, g: GroundTruth) -> float:
    """Pixel-level ROC-AUC with midrank tie handling."""
    s = _as_flat(s, g)
    pos = g.labels
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("pixel_auc needs both classes present")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _sweep(s: np.ndarray, g: GroundTruth):
    """Cumulative prediction/TP counts at each distinct threshold, descending."""
    vals, counts = np.unique(-s, return_counts=True)
    thresholds = -vals  # distinct scores, descending
    pos_counts = np.zeros_like(counts)
    pv, pc = np.unique(-s[g.labels], return_counts=True)
    pos_counts[np.searchsorted(vals, pv)] = pc
    cum_pred = np.cumsum(counts)
    cum_tp = np.cumsum(pos_counts)
    return thresholds, cum_pred, cum_tp


def average_precision(s: np.ndarray, g: GroundTruth) -> float:
    """Area under the pixel precision-recall curve (sum over recall steps)."""
    s = _as_flat(s, g)
    n_pos = int(g.labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average_precision needs positive pixels")
    _, cum_pred, cum_tp = _sweep(s, g)
    precision = cum_tp / cum_pred
    recall = cum_tp / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def _component_detection_counts(s: np.ndarray, g: GroundTruth, thresholds: np.ndarray):
    """Per-threshold per-component counts of pixels scored >= threshold."""
    out = np.empty((len(g.components), thresholds.size), dtype=np.int64)
    for i, comp in enumerate(g.components):
        cs = np.sort(s[comp])  # ascending
        # pixels >= tau, for each descending threshold tau
        out[i] = comp.size - np.searchsorted(cs, thresholds, side="left")
    return out


def pro(s: np.ndarray, g: GroundTruth, fpr_limit: float = DEFAULT_FPR_LIMIT) -> float:
    """Per-region-overlap, integrated over FPR in [0, fpr_limit] and normalized.

    At each distinct threshold the mean fraction of each anomaly region
    covered by the prediction is paired with the false-positive rate; the
    (FPR, PRO) curve is integrated by trapezoid with linear interpolation
    at the limit.
    """
    s = _as_flat(s, g)
    if not g.components:
        raise UndefinedMetricError("pro needs at least one anomaly component")
    n_neg = int((~g.labels).sum())
    if n_neg == 0:
        raise UndefinedMetricError("pro needs at least one negative pixel")
    if not (0.0 < fpr_limit <= 1.0):
        raise UndefinedMetricError(f"fpr_limit must be in (0, 1], got {fpr_limit}")

    thresholds, cum_pred, cum_tp = _sweep(s, g)
    fpr = (cum_pred - cum_tp) / n_neg
    counts = _component_detection_counts(s, g, thresholds)
    sizes = np.array([c.size for c in g.components], dtype=np.float64)
    pro_vals = (counts / sizes[:, None]).mean(axis=0)

    xs = np.concatenate([[0.0], fpr])
    ys = np.concatenate([[0.0], pro_vals])
    if xs[-1] < fpr_limit:
        xs = np.append(xs, fpr_limit)
        ys = np.append(ys, ys[-1])
    y_at_limit = float(np.interp(fpr_limit, xs, ys))
    keep = xs <= fpr_limit
    xs = np.append(xs[keep], fpr_limit)
    ys = np.append(ys[keep], y_at_limit)
    return float(np.trapezoid(ys, xs) / fpr_limit)


def _instance_recall(s: np.ndarray, g: GroundTruth, thresholds: np.ndarray) -> np.ndarray:
    counts = _component_detection_counts(s, g, thresholds)
    sizes = np.array([c.size for c in g.components], dtype=np.float64)
    detected = counts >= INSTANCE_PIXEL_FRACTION * sizes[:, None]
    return detected.mean(axis=0)


def iap(s: np.ndarray, g: GroundTruth) -> float:
    """Area under the (instance recall, pixel precision) curve."""
    s = _as_flat(s, g)
    if not g.components:
        raise UndefinedMetricError("iap needs at least one anomaly component")
    thresholds, cum_pred, cum_tp = _sweep(s, g)
    precision = cum_tp / cum_pred
    recall = _instance_recall(s, g, thresholds)
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def iap_at_k(s: np.ndarray, g: GroundTruth, k: int = DEFAULT_K) -> float:
    """Pixel precision at the tightest threshold reaching instance recall k%.

    Returns 0 when instance recall never reaches k/100.
    """
    s = _as_flat(s, g)
    if not g.components:
        raise UndefinedMetricError("iap_at_k needs at least one anomaly component")
    thresholds, cum_pred, cum_tp = _sweep(s, g)
    precision = cum_tp / cum_pred
    recall = _instance_recall(s, g, thresholds)
    hit = np.flatnonzero(recall >= k / 100.0)
    if hit.size == 0:
        return 0.0
    return float(precision[hit[0]])


@dataclass
class MetricsReport:
    """The five localization scores plus trial statistics and metric config."""

    pixel_auc: float
    pro: float
    ap: float
    iap: float
    iap_at_k: float
    k: int = DEFAULT_K
    fpr_limit: float = DEFAULT_FPR_LIMIT
    connectivity: int = CONNECTIVITY
    n_trials: int = 1
    mean: dict = field(default_factory=dict)
    stddev: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    METRIC_NAMES = ("pixel_auc", "pro", "ap", "iap", "iap_at_k")

    @classmethod
    def from_scores(
        cls, s: np.ndarray, g: GroundTruth,
        fpr_limit: float = DEFAULT_FPR_LIMIT, k: int = DEFAULT_K,
    ) -> "MetricsReport":
        return cls(
            pixel_auc=pixel_auc(s, g),
            pro=pro(s, g, fpr_limit),
            ap=average_precision(s, g),
            iap=iap(s, g),
            iap_at_k=iap_at_k(s, g, k),
            k=k,
            fpr_limit=fpr_limit,
        )

    @classmethod
    def aggregate(cls, reports: list["MetricsReport"]) -> "MetricsReport":
        """Mean/stddev over trials; headline scores are the means."""
        if not reports:
            raise UndefinedMetricError("cannot aggregate zero reports")
        vals = {
            name: np.array([getattr(r, name) for r in reports])
            for name in cls.METRIC_NAMES
        }
        mean = {name: float(v.mean()) for name, v in vals.items()}
        std = {name: float(v.std(ddof=0)) for name, v in vals.items()}
        return cls(
            **mean,
            k=reports[0].k,
            fpr_limit=reports[0].fpr_limit,
            n_trials=len(reports),
            mean=mean,
            stddev=std,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def compute_all(
    s: np.ndarray, g: GroundTruth,
    fpr_limit: float = DEFAULT_FPR_LIMIT, k: int = DEFAULT_K,
) -> MetricsReport:
    return MetricsReport.from_scores(s, g, fpr_limit=fpr_limit, k=k)
