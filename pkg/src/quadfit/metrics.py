"""Evaluation metrics: Procrustes-aligned MPJPE, PCK, mask IoU, Wilcoxon test."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.stats

from .render import Mask


@dataclass
class MetricsReport:
    p_mpjpe_per_frame: np.ndarray = None
    p_mpjpe_mean: float = None
    p_mpjpe_std: float = None
    pck: float = None
    iou: float = None
    statistic: float = None
    p_value: float = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pck is not None and not (0.0 <= self.pck <= 1.0):
            raise ValueError("invalid metric: pck outside [0,1]")
        if self.iou is not None and not (0.0 <= self.iou <= 1.0):
            raise ValueError("invalid metric: iou outside [0,1]")
        if self.p_mpjpe_std is not None and self.p_mpjpe_std < 0:
            raise ValueError("invalid metric: negative std")


def procrustes_align(X, Y, with_scale=True):
    """Similarity transform (s, R, t) minimizing ||s R x_i + t - y_i||^2.

    Rotation from the SVD of the centered cross-covariance with determinant
    sign correction, so R is always proper. Returns (s, R, t, X_aligned).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError("shape error")
    n = X.shape[0]
    if n < 3:
        raise ValueError("rank deficient")
    mx = X.mean(axis=0)
    my = Y.mean(axis=0)
    Xc = X - mx
    Yc = Y - my
    for C in (Xc, Yc):
        sv = np.linalg.svd(C, compute_uv=False)
        if sv[1] <= 1e-12 * max(sv[0], 1.0):
            raise ValueError("rank deficient")
    H = Xc.T @ Yc
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    if with_scale:
        s = (S * np.diag(D)).sum() / (Xc * Xc).sum()
    else:
        s = 1.0
    t = my - s * R @ mx
    Xa = s * X @ R.T + t
    return s, R, t, Xa


def p_mpjpe(pred, gt, with_scale=True):
    """Per-frame mean joint error after Procrustes alignment.

    Returns (per_frame (T,), mean, std); std is the population deviation.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ValueError("shape error")
    errs = np.empty(pred.shape[0])
    for t in range(pred.shape[0]):
        _, _, _, Xa = procrustes_align(pred[t], gt[t], with_scale=with_scale)
        errs[t] = np.linalg.norm(Xa - gt[t], axis=-1).mean()
    return errs, float(errs.mean()), float(errs.std())


def pck(pred2d, gt2d, conf, alpha=0.1, norm=None, conf_thresh=0.5):
    """Fraction of confident keypoints with error strictly below alpha*norm.

    norm is the per-frame normalizer (scalar or (T,) array), conventionally
    the ground-truth bbox diagonal.
    """
    pred2d = np.asarray(pred2d, dtype=np.float64)
    gt2d = np.asarray(gt2d, dtype=np.float64)
    conf = np.asarray(conf, dtype=np.float64)
    if pred2d.shape != gt2d.shape or pred2d.shape[:2] != conf.shape:
        raise ValueError("shape error")
    if norm is None:
        raise ValueError("invalid scale")
    norm = np.broadcast_to(np.asarray(norm, dtype=np.float64), (pred2d.shape[0],))
    if (norm <= 0).any():
        raise ValueError("invalid scale")
    valid = conf >= conf_thresh
    if not valid.any():
        raise ValueError("no supervision")
    err = np.linalg.norm(pred2d - gt2d, axis=-1)
    hit = err < alpha * norm[:, None]
    return float(hit[valid].mean())


def iou_masks(a, b, threshold=0.5):
    """Intersection over union of thresholded masks; empty vs empty is 1.0."""
    av = a.array() if isinstance(a, Mask) else np.asarray(a, dtype=np.float64)
    bv = b.array() if isinstance(b, Mask) else np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape:
        raise ValueError("shape error")
    A = av >= threshold
    B = bv >= threshold
    union = (A | B).sum()
    if union == 0:
        return 1.0
    return float((A & B).sum() / union)


def _average_ranks(x):
    """Ranks 1..n with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(errors_a, errors_b):
    """Paired two-sided Wilcoxon signed-rank test.

    Zero differences are dropped; ties share average ranks. The statistic is
    min(W+, W-). Exact p by full sign enumeration for N <= 12, otherwise the
    tie-corrected normal approximation with continuity correction.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("shape error")
    d = a - b
    d = d[d != 0.0]
    if len(d) == 0:
        raise ValueError("identical samples")
    n = len(d)
    if n < 5:
        raise ValueError("too few samples")
    ranks = _average_ranks(np.abs(d))
    w_pos = ranks[d > 0].sum()
    w_neg = ranks[d < 0].sum()
    stat = min(w_pos, w_neg)
    total = n * (n + 1) / 2.0

    if n <= 12:
        # all 2^n sign assignments: row k has bit pattern of k
        bits = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
        wplus = bits @ ranks
        eps = 1e-9
        p = ((wplus <= stat + eps).sum() + (wplus >= total - stat - eps).sum()) / 2.0**n
        return float(stat), float(min(p, 1.0))

    mu = total / 2.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    var -= (counts.astype(np.float64) ** 3 - counts).sum() / 48.0
    if var <= 0:
        raise ValueError("identical samples")
    z = (mu - stat - 0.5) / np.sqrt(var)
    p = 2.0 * scipy.stats.norm.sf(z)
    return float(stat), float(min(p, 1.0))


def write_metrics_csv(path, rows, summary=None):
    """Rows of (clip, frame, metric, value); optional summary lines appended."""
    import csv

    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["clip", "frame", "metric", "value"])
        for clip, frame, metric, val in rows:
            wr.writerow([clip, frame, metric, f"{val:.10g}"])
        if summary:
            for name, text in summary.items():
                wr.writerow(["summary", "", name, text])
