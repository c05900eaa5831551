"""Salient-object-detection metrics: MAE, adaptive F-measure, weighted F-measure,
S-measure, E-measure, and precision/recall/F-measure threshold curves.

Predictions are float maps in [0, 1]; ground truth is binarized at 0.5.
Constants follow the metrics' original reference implementations:
adaptive threshold ``min(2 * mean(pred), 1)``, beta^2 = 0.3 for the F-measure,
a 7x7 Gaussian with sigma = 5 and decay ``log(0.5) / 5`` for the weighted
F-measure, alpha = 0.5 for the S-measure.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DomainError, UndefinedMetricError

log = logging.getLogger(__name__)

EPS = np.spacing(1.0)
N_THRESHOLDS = 256
METRIC_NAMES = ("mae", "fm", "wf", "sm", "em")


def _prep(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt) > 0.5
    if pred.shape != gt.shape:
        raise DomainError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if pred.ndim != 2:
        raise DomainError(f"expected 2-D maps, got shape {pred.shape}")
    return pred, gt


def adaptive_threshold(pred: np.ndarray) -> float:
    return min(2.0 * float(np.mean(pred)), 1.0)


def adaptive_binarize(pred: np.ndarray) -> np.ndarray:
    """``pred >= min(2 * mean, 1)``; an all-zero map stays empty."""
    thr = adaptive_threshold(pred)
    return pred > 0 if thr == 0 else pred >= thr


def mae(pred, gt) -> float:
    pred, gt = _prep(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def _f_beta(precision, recall, beta2):
    num = (1.0 + beta2) * precision * recall
    den = beta2 * precision + recall
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def f_measure(pred, gt, beta2: float = 0.3) -> float:
    """F-measure of the prediction binarized at the adaptive threshold.

    Raises:
        UndefinedMetricError: ground truth has no foreground.
    """
    pred, gt = _prep(pred, gt)
    n_gt = int(gt.sum())
    if n_gt == 0:
        raise UndefinedMetricError("F-measure undefined: empty ground-truth foreground")
    binary = adaptive_binarize(pred)
    tp = int(np.count_nonzero(binary & gt))
    if tp == 0:
        return 0.0
    precision = tp / int(binary.sum())
    recall = tp / n_gt
    return float(_f_beta(precision, recall, beta2))


def _gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2.0
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return k / k.sum()


def _nearest_fg_error(err: np.ndarray, gt: np.ndarray, dist: np.ndarray, reach: int) -> np.ndarray:
    """``err`` copied from the nearest foreground pixel onto background pixels within ``reach``.

    Ties go to the nearest pixel with the smallest row-major index.  Pixels
    farther than ``reach`` keep their own error (they never influence the
    result: only foreground pixels read the smoothed error map).
    """
    h, w = gt.shape
    out = err.copy()
    best = np.full(gt.shape, np.inf)
    # a pixel within Chebyshev distance `reach` of the object has its nearest
    # object pixel within Euclidean reach*sqrt(2), hence inside this window
    r = int(np.ceil(reach * np.sqrt(2.0)))
    pad_gt = np.pad(gt, r)
    pad_err = np.pad(err, r)
    need = ~gt & (dist <= reach * np.sqrt(2.0) + 1e-9)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            d2 = dy * dy + dx * dx
            cand = pad_gt[r + dy:r + dy + h, r + dx:r + dx + w] & need & (d2 < best)
            best[cand] = d2
            out[cand] = pad_err[r + dy:r + dy + h, r + dx:r + dx + w][cand]
    return out


def weighted_f(pred, gt, beta2: float = 1.0) -> float:
    """Weighted F-measure: errors spread by a Gaussian dependency kernel and
    background errors up-weighted away from the object.

    Raises:
        UndefinedMetricError: ground truth has no foreground.
    """
    pred, gt = _prep(pred, gt)
    if not gt.any():
        raise UndefinedMetricError("weighted F-measure undefined: empty ground-truth foreground")
    kernel = _gaussian_kernel()
    reach = kernel.shape[0] // 2
    dist = ndimage.distance_transform_edt(~gt)
    err = np.abs(pred - gt)
    err_t = _nearest_fg_error(err, gt, dist, reach)
    err_a = ndimage.convolve(err_t, kernel, mode="constant", cval=0.0)
    min_e = np.where(gt & (err_a < err), err_a, err)
    importance = np.where(gt, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_e * importance
    tpw = gt.sum() - ew[gt].sum()
    fpw = ew[~gt].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tpw / (tpw + fpw + EPS)
    return float((1.0 + beta2) * recall * precision / (recall + beta2 * precision + EPS))


def _object_score(x: np.ndarray) -> float:
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + EPS)


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    denom = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / denom
    sy = ((gt - y) ** 2).sum() / denom
    sxy = ((pred - x) * (gt - y)).sum() / denom
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def _centroid(gt: np.ndarray):
    h, w = gt.shape
    if not gt.any():
        return int(round(w / 2)) + 1, int(round(h / 2)) + 1
    yx = np.argwhere(gt).mean(axis=0).round()
    # one-based split point, as in the reference implementation
    return int(yx[1]) + 1, int(yx[0]) + 1


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure ``alpha * object + (1 - alpha) * region``, clipped at 0."""
    pred, gt = _prep(pred, gt)
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must be in [0, 1], got {alpha}")
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())

    g = gt.astype(np.float64)
    fg = pred[gt]
    bg = 1.0 - pred[~gt]
    obj = y * _object_score(fg) + (1.0 - y) * _object_score(bg)

    h, w = gt.shape
    cx, cy = _centroid(gt)
    area = h * w
    parts = [
        (cx * cy / area, pred[:cy, :cx], g[:cy, :cx]),
        ((w - cx) * cy / area, pred[:cy, cx:], g[:cy, cx:]),
        (cx * (h - cy) / area, pred[cy:, :cx], g[cy:, :cx]),
    ]
    parts.append((1.0 - sum(p[0] for p in parts), pred[cy:, cx:], g[cy:, cx:]))
    region = sum(wt * _ssim(p, q) for wt, p, q in parts if p.size)

    return float(max(0.0, alpha * obj + (1.0 - alpha) * region))


def e_measure(pred, gt) -> float:
    """Enhanced-alignment measure of the adaptively binarized prediction.

    Constant ground truth uses the original convention: the score is the
    mean of ``1 - binary`` (all background) or of ``binary`` (all foreground).
    """
    pred, gt = _prep(pred, gt)
    binary = adaptive_binarize(pred).astype(np.float64)
    g = gt.astype(np.float64)
    if not gt.any():
        return float(np.mean(1.0 - binary))
    if gt.all():
        return float(np.mean(binary))
    bc = binary - binary.mean()
    gc = g - g.mean()
    align = 2.0 * gc * bc / (gc * gc + bc * bc)
    return float(np.mean((1.0 + align) ** 2 / 4.0))


def thresholds(n: int = N_THRESHOLDS) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def pr_counts(pred, gt, ts: Optional[np.ndarray] = None):
    """True-positive and predicted-positive counts of ``pred >= t`` for each threshold."""
    pred, gt = _prep(pred, gt)
    ts = thresholds() if ts is None else np.asarray(ts, dtype=np.float64)
    fg = np.sort(pred[gt])
    bg = np.sort(pred[~gt])
    tp = fg.size - np.searchsorted(fg, ts, side="left")
    fp = bg.size - np.searchsorted(bg, ts, side="left")
    return tp, tp + fp


def image_curves(pred, gt, ts=None, beta2: float = 0.3):
    """Per-threshold precision, recall and F-measure for one image.

    Precision is 0 at thresholds where nothing is predicted.
    """
    pred, gt = _prep(pred, gt)
    n_gt = int(gt.sum())
    if n_gt == 0:
        raise UndefinedMetricError("curves undefined: empty ground-truth foreground")
    tp, pp = pr_counts(pred, gt, ts)
    precision = np.where(pp > 0, tp / np.maximum(pp, 1), 0.0)
    recall = tp / n_gt
    return precision, recall, _f_beta(precision, recall, beta2)


def max_f_measure(pred, gt, beta2: float = 0.3) -> float:
    return float(image_curves(pred, gt, beta2=beta2)[2].max())


def curves(preds: Sequence, gts: Sequence, beta2: float = 0.3) -> Dict[str, np.ndarray]:
    """Precision, recall and F-measure at 256 uniform thresholds, averaged over images.

    Images with empty ground truth are skipped.
    """
    if len(preds) == 0 or len(preds) != len(gts):
        raise DomainError("curves need non-empty, equally long prediction and ground-truth lists")
    ts = thresholds()
    acc = np.zeros((3, ts.size))
    n = 0
    for p, g in zip(preds, gts):
        try:
            acc += np.stack(image_curves(p, g, ts, beta2))
        except UndefinedMetricError:
            continue
        n += 1
    if n == 0:
        raise UndefinedMetricError("curves undefined: every ground truth is empty")
    acc /= n
    return {"threshold": ts, "precision": acc[0], "recall": acc[1], "fm": acc[2]}


@dataclass
class MetricReport:
    per_image: List[dict] = field(default_factory=list)
    means: Dict[str, float] = field(default_factory=dict)
    curves: Dict[str, np.ndarray] = field(default_factory=dict)

    def table(self) -> str:
        lines = [
            "# conventions: adaptive threshold = min(2*mean(O), 1) for Fm and Em; beta^2 = 0.3 (Fm), 1 (WF);",
            "# WF kernel 7x7 gaussian sigma=5; Sm alpha=0.5; empty-GT images excluded from Fm/WF means",
            f"{'id':<24}" + "".join(f"{m:>10}" for m in METRIC_NAMES),
        ]
        for row in self.per_image:
            cells = "".join(f"{'n/a':>10}" if row[m] is None else f"{row[m]:>10.4f}" for m in METRIC_NAMES)
            lines.append(f"{row['id']:<24}" + cells)
        lines.append(f"{'mean':<24}" + "".join(f"{self.means.get(m, float('nan')):>10.4f}" for m in METRIC_NAMES))
        return "\n".join(lines) + "\n"

    def write(self, out_dir, plots: bool = False) -> Path:
        """Write ``report.txt``, ``metrics.json`` and the curve files to ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.table())
        payload = {f"mean_{k}": v for k, v in self.means.items()}
        payload["n_images"] = len(self.per_image)
        payload["per_image"] = self.per_image
        (out / "metrics.json").write_text(json.dumps(payload, indent=2))
        if self.curves:
            np.savetxt(out / "pr_curve.txt", np.column_stack([self.curves["recall"], self.curves["precision"]]),
                       header="recall precision", fmt="%.8f")
            np.savetxt(out / "fm_curve.txt", np.column_stack([self.curves["threshold"], self.curves["fm"]]),
                       header="threshold fm", fmt="%.8f")
            if plots:
                _plot_curves(self.curves, out)
        return out


def _plot_curves(c, out: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].plot(c["recall"], c["precision"])
    axes[0].set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.02), title="PR curve")
    axes[1].plot(c["threshold"], c["fm"])
    axes[1].set(xlabel="threshold", ylabel="F-measure", xlim=(0, 1), ylim=(0, 1.02), title="Fm vs threshold")
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=120)
    plt.close(fig)


def evaluate(preds: Sequence, gts: Sequence, ids: Optional[Sequence[str]] = None) -> MetricReport:
    """Per-image metrics, dataset means and curves for matched prediction / ground-truth lists."""
    if len(preds) != len(gts):
        raise DomainError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    ids = list(ids) if ids is not None else [f"{i:05d}" for i in range(len(preds))]
    rows = []
    for sid, p, g in zip(ids, preds, gts):
        row = {"id": sid, "mae": mae(p, g), "sm": s_measure(p, g), "em": e_measure(p, g)}
        for name, fn in (("fm", f_measure), ("wf", weighted_f)):
            try:
                row[name] = fn(p, g)
            except UndefinedMetricError:
                log.warning("image %s: %s undefined (empty ground truth); excluded from mean", sid, name)
                row[name] = None
        rows.append(row)
    means = {}
    for m in METRIC_NAMES:
        vals = [r[m] for r in rows if r[m] is not None]
        means[m] = float(np.mean(vals)) if vals else float("nan")
    try:
        cv = curves(preds, gts)
    except UndefinedMetricError:
        cv = {}
    return MetricReport(per_image=rows, means=means, curves=cv)
