"""From cluster logits to scored segmentations.

Clusters are matched to ground-truth classes once over a whole dataset,
either by majority voting or by Hungarian matching on -intersection (any
clusters left unmatched fall back to majority voting).  mIoU averages the
IoU of the classes that occur in the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError


# -- resampling -----------------------------------------------------------------

def _axis_weights(n_src: int, n_dst: int):
    x = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    x = np.clip(x, 0, n_src - 1)
    i0 = np.floor(x).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, x - i0


def resize_bilinear(arr: np.ndarray, H: int, W: int) -> np.ndarray:
    """Separable bilinear resize of the two leading axes, half-pixel centers."""
    arr = np.asarray(arr)
    h, w = arr.shape[:2]
    if (h, w) == (H, W):
        return arr.copy()
    extra = (1,) * (arr.ndim - 2)
    y0, y1, fy = _axis_weights(h, H)
    fy = fy.reshape((H, 1) + extra)
    rows = arr[y0] * (1 - fy) + arr[y1] * fy
    x0, x1, fx = _axis_weights(w, W)
    fx = fx.reshape((1, W) + extra)
    return rows[:, x0] * (1 - fx) + rows[:, x1] * fx


def upsample_bilinear(logits: np.ndarray, H: int, W: int) -> np.ndarray:
    h, w = logits.shape[:2]
    if H < h or W < w:
        raise ConfigError(f"upsample_bilinear cannot shrink ({h}x{w} -> {H}x{W})")
    return resize_bilinear(logits, H, W)


def argmax_assign(logits: np.ndarray) -> np.ndarray:
    """Per-pixel index of the largest logit; ties go to the lowest index."""
    return np.argmax(logits, axis=-1)


# -- Hungarian matching ----------------------------------------------------------

@dataclass
class Assignment:
    rows: np.ndarray
    cols: np.ndarray
    total: float


def _hungarian_square(C: np.ndarray):
    """Shortest augmenting path Hungarian method; returns (col_of_row, u, v)."""
    N = C.shape[0]
    u = np.zeros(N + 1)
    v = np.zeros(N + 1)
    owner = np.zeros(N + 1, dtype=np.intp)  # owner[j] = row (1-based) holding column j
    way = np.zeros(N + 1, dtype=np.intp)
    Cp = np.zeros((N + 1, N + 1))
    Cp[1:, 1:] = C
    for i in range(1, N + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(N + 1, np.inf)
        used = np.zeros(N + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = Cp[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.empty(N, dtype=np.intp)
    col_of_row[owner[1:] - 1] = np.arange(N)
    return col_of_row, u[1:], v[1:]


def _lexicographic_refine(tight: np.ndarray, col_of_row: np.ndarray) -> np.ndarray:
    """Smallest (row-ordered) perfect matching inside the tight-edge graph."""
    N = len(col_of_row)
    col_of_row = col_of_row.copy()
    row_of_col = np.empty(N, dtype=np.intp)
    row_of_col[col_of_row] = np.arange(N)
    for i in range(N):
        target = col_of_row[i]
        options = np.flatnonzero(tight[i, :target])
        if len(options) == 0:
            continue
        # rows (after i) that can hand their column on and end at ``target``
        next_col = np.full(N, -1)
        reached = np.zeros(N, dtype=bool)
        frontier = [target]
        open_rows = np.zeros(N, dtype=bool)
        open_rows[i + 1:] = True
        while frontier:
            c = frontier.pop()
            rows = np.flatnonzero(tight[:, c] & open_rows & ~reached)
            reached[rows] = True
            next_col[rows] = c
            frontier.extend(col_of_row[rows].tolist())
        for j in options:
            r = row_of_col[j]
            if r > i and reached[r]:
                while r != -1:
                    c = next_col[r]
                    nxt = row_of_col[c] if c != target else -1
                    col_of_row[r] = c
                    row_of_col[c] = r
                    r = nxt
                col_of_row[i] = j
                row_of_col[j] = i
                break
    return col_of_row


def hungarian(cost) -> Assignment:
    """Minimum-cost one-to-one assignment of min(n, m) pairs.

    Among equally cheap assignments the one whose column sequence (in row
    order) is lexicographically smallest is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DataError(f"cost must be 2-D, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise DataError("cost matrix contains non-finite values")
    n, m = cost.shape
    if n == 0 or m == 0:
        return Assignment(np.empty(0, np.intp), np.empty(0, np.intp), 0.0)
    N = max(n, m)
    C = np.zeros((N, N))
    C[:n, :m] = cost
    col_of_row, u, v = _hungarian_square(C)
    tol = 1e-9 * max(1.0, np.abs(C).max())
    tight = (C - u[:, None] - v[None, :]) <= tol
    col_of_row = _lexicographic_refine(tight, col_of_row)
    rows = np.arange(n)
    cols = col_of_row[:n]
    keep = cols < m
    rows, cols = rows[keep], cols[keep]
    return Assignment(rows, cols, float(cost[rows, cols].sum()))


# -- matching and metrics ---------------------------------------------------------

def confusion_matrix(pred, gt, n_clusters: int, n_classes: int, ignore_index: int | None = None) -> np.ndarray:
    """(n_clusters, n_classes) pixel counts, skipping ``ignore_index`` in gt."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise DataError(f"shape mismatch: pred {pred.size} vs gt {gt.size} pixels")
    keep = np.ones(gt.shape, bool) if ignore_index is None else gt != ignore_index
    p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= n_clusters):
        raise DataError(f"prediction labels outside [0, {n_clusters})")
    if g.size and (g.min() < 0 or g.max() >= n_classes):
        raise DataError(f"ground-truth labels outside [0, {n_classes})")
    return np.bincount(p * n_classes + g, minlength=n_clusters * n_classes).reshape(n_clusters, n_classes)


def majority_vote(conf: np.ndarray) -> np.ndarray:
    """cluster -> most frequent class (ties: lowest class id; empty cluster: 0)."""
    conf = np.asarray(conf)
    if conf.size == 0 or conf.sum() == 0:
        raise DataError("majority vote needs at least one scored pixel")
    return np.argmax(conf, axis=1)


def hungarian_match(conf: np.ndarray) -> np.ndarray:
    """cluster -> class via Hungarian on -intersection; leftovers by majority vote."""
    mapping = majority_vote(conf)
    a = hungarian(-np.asarray(conf, dtype=np.float64))
    mapping[a.rows] = a.cols
    return mapping


@dataclass
class Scores:
    accuracy: float
    miou: float
    iou: np.ndarray  # per class, NaN where the class is absent from gt

    def lines(self) -> list[str]:
        return [f"Acc={self.accuracy:.6f}", f"mIoU={self.miou:.6f}"]


def scores_from_confusion(conf: np.ndarray) -> Scores:
    """Metrics from a square (pred class, gt class) count matrix."""
    conf = np.asarray(conf, dtype=np.int64)
    total = conf.sum()
    if total == 0:
        raise DataError("no scored pixels")
    tp = np.diag(conf).astype(np.float64)
    pred_count = conf.sum(axis=1)
    gt_count = conf.sum(axis=0)
    union = pred_count + gt_count - tp
    present = gt_count > 0
    iou = np.full(len(tp), np.nan)
    iou[present] = tp[present] / union[present]
    return Scores(float(tp.sum() / total), float(iou[present].mean()), iou)


def score(pred, gt, n_classes: int, ignore_index: int | None = None) -> Scores:
    """Pixel accuracy, mIoU and per-class IoU of class-valued predictions."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return scores_from_confusion(confusion_matrix(pred, gt, n_classes, n_classes, ignore_index))


@dataclass
class EvalResult:
    scores: Scores
    mapping: np.ndarray
    confusion: np.ndarray

    @property
    def accuracy(self):
        return self.scores.accuracy

    @property
    def miou(self):
        return self.scores.miou


def evaluate_labels(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], n_clusters: int, n_classes: int,
                    match: str = "vote", ignore_index: int | None = None) -> EvalResult:
    """Match clusters to classes over the whole set, then score globally."""
    if len(preds) != len(gts):
        raise DataError(f"{len(preds)} predictions vs {len(gts)} ground-truth masks")
    if not preds:
        raise DataError("empty dataset")
    conf = np.zeros((n_clusters, n_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        if np.shape(p) != np.shape(g):
            raise DataError(f"mask shape mismatch: {np.shape(p)} vs {np.shape(g)}")
        conf += confusion_matrix(p, g, n_clusters, n_classes, ignore_index)
    if match == "vote":
        mapping = majority_vote(conf)
    elif match == "hungarian":
        mapping = hungarian_match(conf)
    else:
        raise ConfigError(f"unknown matching {match!r}")
    class_conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(class_conf, mapping, conf)
    return EvalResult(scores_from_confusion(class_conf), mapping, conf)


# -- inference protocols ------------------------------------------------------------

LogitsFn = Callable[[np.ndarray], np.ndarray]


def _starts(size: int, window: int, stride: int) -> list[int]:
    if size < window:
        raise ConfigError(f"feature map ({size}) smaller than the window ({window})")
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


def sliding_window_logits(logits_fn: LogitsFn, features: np.ndarray, window: tuple[int, int],
                          stride: tuple[int, int] | None = None) -> np.ndarray:
    """Average window logits over an (h, w, c) feature map larger than the window."""
    wh, ww = window
    sh, sw = stride if stride is not None else (max(wh // 2, 1), max(ww // 2, 1))
    h, w = features.shape[:2]
    acc = None
    count = np.zeros((h, w, 1))
    for y in _starts(h, wh, sh):
        for x in _starts(w, ww, sw):
            out = logits_fn(features[None, y:y + wh, x:x + ww])[0]
            if acc is None:
                acc = np.zeros((h, w, out.shape[-1]))
            acc[y:y + wh, x:x + ww] += out
            count[y:y + wh, x:x + ww] += 1
    return acc / count


def predict_masks(logits_fn: LogitsFn, features: np.ndarray, out_size: tuple[int, int],
                  protocol: str = "crop", window: tuple[int, int] | None = None,
                  stride: tuple[int, int] | None = None, chunk: int = 16) -> list[np.ndarray]:
    """Cluster-id masks at ``out_size`` for every image of (n, h, w, c) features."""
    H, W = out_size
    masks = []
    if protocol == "crop":
        for s in range(0, len(features), chunk):
            for lg in logits_fn(features[s:s + chunk]):
                masks.append(argmax_assign(upsample_bilinear(lg, H, W)))
    elif protocol == "window":
        if window is None:
            raise ConfigError("window protocol needs a window size")
        for f in features:
            lg = sliding_window_logits(logits_fn, f, window, stride)
            masks.append(argmax_assign(upsample_bilinear(lg, H, W)))
    else:
        raise ConfigError(f"unknown protocol {protocol!r}")
    return masks


def labels_to_logits(labels: np.ndarray, n_clusters: int) -> np.ndarray:
    """One-hot logits for hard patch labels, so they share the upsampling path."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (n_clusters,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out
