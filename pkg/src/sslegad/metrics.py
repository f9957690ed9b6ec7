"""Evaluation metrics: Dice score (percent) and Hausdorff distance (pixels).

Hausdorff runs over all foreground pixel coordinates (not extracted
contours): unambiguous, exactly reproducible by a brute-force oracle. The
production path uses a KD-tree for the directed distances; both sides compute
the same Euclidean metric.
"""

from __future__ import annotations

from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError

METRICS_CSV_HEADER = "round,split,n,dsc_mean,hd_mean"


def _as_bool_mask(m) -> np.ndarray:
    arr = np.asarray(getattr(m, "data", m))
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-d binary mask, got shape {arr.shape}")
    return arr > 0.5


def dice_score(pred_mask, gt_mask) -> float:
    """100 * 2|P & G| / (|P| + |G|); two empty masks score 100."""
    p = _as_bool_mask(pred_mask)
    g = _as_bool_mask(gt_mask)
    if p.shape != g.shape:
        raise ShapeError(f"dice_score: shapes {p.shape} vs {g.shape}")
    p_sum = int(p.sum())
    g_sum = int(g.sum())
    if p_sum + g_sum == 0:
        return 100.0
    inter = int((p & g).sum())
    return 100.0 * 2.0 * inter / (p_sum + g_sum)


def hausdorff(pred_mask, gt_mask) -> float:
    """Symmetric Hausdorff distance between foreground pixel sets, Euclidean.

    Both sets empty -> 0; exactly one empty -> the image diagonal length
    (degenerate predictions are penalized, not crashed).
    """
    p = _as_bool_mask(pred_mask)
    g = _as_bool_mask(gt_mask)
    if p.shape != g.shape:
        raise ShapeError(f"hausdorff: shapes {p.shape} vs {g.shape}")
    pc = np.argwhere(p).astype(np.float64)
    gc = np.argwhere(g).astype(np.float64)
    if len(pc) == 0 and len(gc) == 0:
        return 0.0
    if len(pc) == 0 or len(gc) == 0:
        return float(np.sqrt(p.shape[0] ** 2 + p.shape[1] ** 2))
    d_pg = cKDTree(gc).query(pc)[0].max()
    d_gp = cKDTree(pc).query(gc)[0].max()
    return float(max(d_pg, d_gp))


def predict_masks(net, images: np.ndarray, batch_size: int = 25) -> np.ndarray:
    """Per-pixel argmax foreground masks for a stack of (1, H, W) images."""
    masks = []
    with ag.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = Tensor(images[start:start + batch_size])
            logits = net.forward(chunk)
            masks.append(logits.data.argmax(axis=1) == 1)
    return np.concatenate(masks, axis=0)


def evaluate(net, samples: Sequence, batch_size: int = 25) -> Tuple[float, float]:
    """Mean (DSC, HD) of a network over a nonempty sample set."""
    if not samples:
        raise ShapeError("evaluate: empty sample set")
    images = np.stack([s.image for s in samples])
    preds = predict_masks(net, images, batch_size)
    dscs = []
    hds = []
    for pred, s in zip(preds, samples):
        gt = s.mask[1]
        dscs.append(dice_score(pred, gt))
        hds.append(hausdorff(pred, gt))
    return float(np.mean(dscs)), float(np.mean(hds))


def evaluate_dsc(net, samples: Sequence, batch_size: int = 25) -> float:
    """Mean DSC only; the per-epoch checkpoint criterion, cheaper than the
    full pair because it skips the Hausdorff trees."""
    if not samples:
        raise ShapeError("evaluate_dsc: empty sample set")
    images = np.stack([s.image for s in samples])
    preds = predict_masks(net, images, batch_size)
    return float(np.mean([dice_score(pred, s.mask[1])
                          for pred, s in zip(preds, samples)]))


def metrics_csv_row(round_index: int, split: str, n: int,
                    dsc_mean: float, hd_mean: float) -> str:
    return ",".join([str(round_index), split, str(n), repr(float(dsc_mean)),
                     repr(float(hd_mean))])
