"""Training losses: keypoint, silhouette, temporal smoothness, and priors.

All four losses accept tape variables anywhere a continuous input appears,
so their gradients flow end to end. Each loss takes its own weight and
returns the weighted scalar; `total_loss` just sums and snapshots a report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .model import MeshModel
from .render import Mask


@dataclass(frozen=True)
class LossWeights:
    w_kp: float = 0.001
    w_sil: float = 1e-4
    w_beta_prior: float = 50.0
    w_theta_prior: float = 0.01
    w_smooth_gamma: float = 0.1
    w_smooth_global: float = 0.2
    w_smooth_joints: float = 10.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"config error: negative weight {k}")


@dataclass
class LossReport:
    l_kp: float
    l_sil: float
    l_smooth: float
    l_prior: float
    total: float
    parts: dict = field(default_factory=dict)

    def row(self):
        return [self.l_kp, self.l_sil, self.l_smooth, self.l_prior, self.total]

    HEADER = ["l_kp", "l_sil", "l_smooth", "l_prior", "total"]


def geman_mcclure_sq(q, sigma):
    """Robustifier on a squared residual: rho(x) = s^2 x^2/(s^2+x^2), x^2=q.

    Taking the squared distance directly keeps the loss smooth at zero
    residual (no sqrt kink).
    """
    s2 = sigma * sigma
    return s2 * q / (s2 + q)


def smooth_l1(x, transition=1.0):
    """Huber-style penalty, quadratic inside the transition point."""
    ax = tp.absolute(x) if isinstance(x, tp.Var) else np.abs(x)
    quad = (0.5 / transition) * x * x
    lin = ax - 0.5 * transition
    if isinstance(x, tp.Var):
        return tp.where(tp.value(ax) < transition, quad, lin)
    return np.where(ax < transition, quad, lin)


def keypoint_loss(pred, gt, conf, w, sigma_gm=50.0):
    """Confidence-weighted robust reprojection loss.

    w * sum_t sum_j conf^2 rho(||pred - gt||) / sum_t sum_j conf^2,
    rho the Geman-McClure robustifier with scale sigma_gm (pixels).
    """
    gt = np.asarray(gt, dtype=np.float64)
    conf = np.asarray(conf, dtype=np.float64)
    if tp.value(pred).shape != gt.shape or gt.shape[:-1] != conf.shape:
        raise ValueError("shape error")
    lam2 = conf * conf
    denom = lam2.sum()
    if denom <= 0.0:
        raise ValueError("no supervision")
    diff = pred - gt
    q = (diff * diff).sum(axis=-1)  # squared pixel distance
    rho = geman_mcclure_sq(q, sigma_gm)
    return (w / denom) * (rho * lam2).sum()


def silhouette_loss(pred, gt, w, valid=None, stats=None):
    """Smooth-L1 between soft and reference masks, summed over valid frames.

    Each frame contributes the mean over pixels. Frames flagged invalid are
    skipped; if `stats` is a dict its "skipped" entry is set to the count.
    """
    T = len(pred)
    if len(gt) != T:
        raise ValueError("shape error")
    if valid is None:
        valid = np.ones(T, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    total = 0.0
    skipped = 0
    for t in range(T):
        if not valid[t]:
            skipped += 1
            continue
        pv = pred[t].values if isinstance(pred[t], Mask) else pred[t]
        gv = gt[t].values if isinstance(gt[t], Mask) else gt[t]
        if tp.value(pv).shape != tp.value(gv).shape:
            raise ValueError("shape error")
        total = total + smooth_l1(pv - tp.value(gv)).mean()
    if stats is not None:
        stats["skipped"] = skipped
    return w * total


def smoothness_loss(chi, w, n=None):
    """Second-difference penalty w/(N(T-2)) * sum_t ||chi_t - 2chi_{t-1} + chi_{t-2}||^2.

    chi is a (T, D) sequence (a (T,) vector is treated as D=1). N defaults
    to the sequence length T.
    """
    shape = tp.value(chi).shape
    T = shape[0]
    if T < 3:
        raise ValueError("sequence too short")
    if len(shape) == 1:
        chi = chi.reshape(T, 1)
    N = T if n is None else n
    d2 = chi[2:] - 2.0 * chi[1:-1] + chi[:-2]
    return (w / (N * (T - 2))) * (d2 * d2).sum()


def _mahalanobis_sq(x, mean, cov):
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("invalid prior") from None
    y = x - mean
    z = tp.matmul(y.reshape(1, -1), np.linalg.inv(cov)) if isinstance(y, tp.Var) else (
        y.reshape(1, -1) @ np.linalg.inv(cov)
    )
    return (z.reshape(-1) * y).sum()


def prior_loss(beta, theta_joints, model: MeshModel, w_beta, w_theta):
    """Gaussian shape and pose priors as squared Mahalanobis distances."""
    th = theta_joints.reshape(-1) if isinstance(theta_joints, tp.Var) else np.asarray(
        theta_joints, dtype=np.float64
    ).reshape(-1)
    if tp.value(beta).shape != model.shape_mean.shape:
        raise ValueError("shape error")
    if tp.value(th).shape != model.pose_prior_mean.shape:
        raise ValueError("shape error")
    lb = _mahalanobis_sq(beta, model.shape_mean, model.shape_cov)
    lt = _mahalanobis_sq(th, model.pose_prior_mean, model.pose_prior_cov)
    return w_beta * lb + w_theta * lt


def total_loss(l_kp, l_sil, l_smooth, l_prior, parts=None):
    """Snapshot the weighted terms into a LossReport (floats)."""
    vals = [float(tp.value(x)) for x in (l_kp, l_sil, l_smooth, l_prior)]
    return LossReport(
        l_kp=vals[0],
        l_sil=vals[1],
        l_smooth=vals[2],
        l_prior=vals[3],
        total=float(sum(vals)),
        parts=dict(parts or {}),
    )


def write_trace_csv(path, reports):
    import csv

    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step"] + LossReport.HEADER)
        for i, r in enumerate(reports):
            wr.writerow([i] + [f"{x:.10g}" for x in r.row()])


def read_trace_csv(path):
    import csv

    out = []
    with open(path) as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header[1:] != LossReport.HEADER:
            raise ValueError(f"corrupt dataset: {path}")
        for row in rd:
            vals = [float(x) for x in row[1:]]
            out.append(LossReport(*vals))
    return out
