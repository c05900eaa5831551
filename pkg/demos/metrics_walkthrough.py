"""The five saliency metrics on hand-made predictions of one mask.

    python demos/metrics_walkthrough.py

Each row degrades a perfect prediction in a different way, which shows
what each metric is sensitive to.
"""

import numpy as np
from scipy import ndimage

from csdnet.metrics import e_measure, f_measure, mae, s_measure, weighted_f

gt = np.zeros((64, 64), dtype=bool)
gt[16:44, 20:50] = True
rng = np.random.default_rng(0)

cases = {
    "perfect": gt.astype(float),
    "blurred": ndimage.gaussian_filter(gt.astype(float), 3),
    "shifted 4 px": np.roll(gt, 4, axis=1).astype(float),
    "half object": np.where(np.arange(64)[None, :] < 35, gt, 0).astype(float),
    "noisy": np.clip(gt + 0.25 * rng.standard_normal(gt.shape), 0, 1),
    "uniform 0.5": np.full(gt.shape, 0.5),
    "inverted": (~gt).astype(float),
}

print(f"{'prediction':<14}{'MAE':>8}{'Fm':>8}{'WF':>8}{'Sm':>8}{'Em':>8}")
for name, pred in cases.items():
    row = (mae(pred, gt), f_measure(pred, gt), weighted_f(pred, gt), s_measure(pred, gt), e_measure(pred, gt))
    print(f"{name:<14}" + "".join(f"{v:8.3f}" for v in row))
