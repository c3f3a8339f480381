"""Training losses with analytic gradients w.r.t. the embedding rows.

Cluster memories are constants inside every term: they are rebuilt from the
labelings at the start of each epoch, never backpropagated through.  The
kernel two-sample distance is the biased V-statistic (self-pairs included).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import MemoryBank, NOISE_LABEL

REPORT_TOL = 1e-9
LOSS_CSV_HEADER = "epoch,l_v,l_r,l_vr,l_cmc,l_intra,l_inter,l_sca,l_overall"


@dataclass(frozen=True)
class GradientBuffer:
    """N x d gradient accumulator aligned with one modality's embedding rows.

    Rows never touched by a batch stay exactly zero.
    """

    g: np.ndarray

    @classmethod
    def zeros(cls, n: int, d: int) -> "GradientBuffer":
        return cls(g=np.zeros((n, d)))

    def add_rows(self, rows: np.ndarray, grad: np.ndarray) -> None:
        np.add.at(self.g, rows, grad)


@dataclass(frozen=True)
class LossReport:
    """All loss terms of one evaluation; composition identities are enforced
    at construction (l_cmc = l_v+l_r+l_vr, l_sca = weighted sum, l_overall =
    l_cmc + l_sca)."""

    l_v: float
    l_r: float
    l_vr: float
    l_cmc: float
    l_intra: float
    l_inter: float
    l_sca: float
    l_overall: float

    def __post_init__(self):
        if abs(self.l_cmc - (self.l_v + self.l_r + self.l_vr)) > REPORT_TOL:
            raise ValueError("l_cmc must equal l_v + l_r + l_vr")
        if abs(self.l_overall - (self.l_cmc + self.l_sca)) > REPORT_TOL:
            raise ValueError("l_overall must equal l_cmc + l_sca")


def compose_report(
    l_v: float,
    l_r: float,
    l_vr: float,
    l_intra: float,
    l_inter: float,
    lambda_intra: float,
    lambda_inter: float,
    epoch: int,
    intra_start_epoch: int,
    inter_start_epoch: int,
) -> LossReport:
    """Combine raw loss terms under the epoch schedule.

    Epochs are 1-based; a term contributes (and is reported) only from its
    start epoch onward, before that it is pinned to 0.
    """
    if epoch < intra_start_epoch:
        l_intra = 0.0
    if epoch < inter_start_epoch:
        l_inter = 0.0
    l_cmc = l_v + l_r + l_vr
    l_sca = lambda_intra * l_intra + lambda_inter * l_inter
    return LossReport(
        l_v=l_v,
        l_r=l_r,
        l_vr=l_vr,
        l_cmc=l_cmc,
        l_intra=l_intra,
        l_inter=l_inter,
        l_sca=l_sca,
        l_overall=l_cmc + l_sca,
    )


def loss_csv_row(epoch: int, report: LossReport) -> str:
    vals = (
        report.l_v,
        report.l_r,
        report.l_vr,
        report.l_cmc,
        report.l_intra,
        report.l_inter,
        report.l_sca,
        report.l_overall,
    )
    return f"{epoch}," + ",".join(repr(float(v)) for v in vals)


def cluster_nce(
    features: np.ndarray, labels: np.ndarray, bank: MemoryBank, tau: float
) -> tuple[float, np.ndarray]:
    """Softmax contrastive loss of each sample against all cluster memories.

    loss = mean_i -log( exp(<C_{y_i}, f_i>/tau) / sum_p exp(<C_p, f_i>/tau) )
    Gradient flows to the features only:
    dL/df_i = (softmax_i - onehot_{y_i}) @ C / (tau * batch).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    feats = np.asarray(features, dtype=float)
    labs = np.asarray(labels, dtype=np.int64)
    if feats.shape[0] == 0:
        return 0.0, np.zeros_like(feats)
    if labs.min() < 0 or labs.max() >= bank.cluster_count:
        bad = int(np.flatnonzero((labs < 0) | (labs >= bank.cluster_count))[0])
        raise ValueError(f"batch sample {bad} carries label {labs[bad]} with no memory")
    logits = feats @ bank.centroids.T / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    softmax = expv / expv.sum(axis=1, keepdims=True)
    logp = shifted - np.log(expv.sum(axis=1, keepdims=True))
    n = feats.shape[0]
    loss = float(-logp[np.arange(n), labs].mean())
    delta = softmax.copy()
    delta[np.arange(n), labs] -= 1.0
    grad = delta @ bank.centroids / (tau * n)
    return loss, grad


def intra_alignment(
    features: np.ndarray, labels: np.ndarray, bank: MemoryBank
) -> tuple[float, np.ndarray]:
    """Sum of squared distances of each sample to its cluster memory.

    Gradient per sample is 2*(f - C_y); rows labeled noise contribute
    nothing.
    """
    feats = np.asarray(features, dtype=float)
    labs = np.asarray(labels, dtype=np.int64)
    grad = np.zeros_like(feats)
    keep = np.flatnonzero(labs != NOISE_LABEL)
    if keep.size == 0:
        return 0.0, grad
    residual = feats[keep] - bank.centroids[labs[keep]]
    grad[keep] = 2.0 * residual
    return float((residual**2).sum()), grad


def intra_loss(
    vis_features: np.ndarray,
    vis_labels: np.ndarray,
    vis_bank: MemoryBank,
    inf_features: np.ndarray,
    inf_labels: np.ndarray,
    inf_bank: MemoryBank,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Two-modality intra alignment: visible term plus infrared term."""
    lv, gv = intra_alignment(vis_features, vis_labels, vis_bank)
    lr, gr = intra_alignment(inf_features, inf_labels, inf_bank)
    return lv + lr, gv, gr


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a**2).sum(axis=1)[:, None] + (b**2).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def gaussian_kernel(a: np.ndarray, b: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-_sq_dists(a, b) / (2.0 * sigma**2))


def median_sigma(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the union of both sets
    (self-pairs excluded), floored away from zero."""
    union = np.vstack([x, y])
    d = np.sqrt(_sq_dists(union, union))
    iu = np.triu_indices(union.shape[0], k=1)
    med = float(np.median(d[iu])) if iu[0].size else 0.0
    return max(med, 1e-12)


def mmd2(x: np.ndarray, y: np.ndarray, sigma: float) -> float:
    """Squared maximum mean discrepancy, biased V-statistic.

    (1/|X|^2) sum k(x,x') + (1/|Y|^2) sum k(y,y') - (2/|X||Y|) sum k(x,y),
    with every double sum running over all ordered pairs including self-pairs.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("both sets must be non-empty")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return float(
        gaussian_kernel(x, x, sigma).mean()
        + gaussian_kernel(y, y, sigma).mean()
        - 2.0 * gaussian_kernel(x, y, sigma).mean()
    )


def mmd2_grad_first(x: np.ndarray, y: np.ndarray, sigma: float) -> tuple[float, np.ndarray]:
    """mmd2(x, y, sigma) plus its gradient w.r.t. x with y held constant
    (stop-gradient on the second argument)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n, m = x.shape[0], y.shape[0]
    kxx = gaussian_kernel(x, x, sigma)
    kxy = gaussian_kernel(x, y, sigma)
    kyy = gaussian_kernel(y, y, sigma)
    value = float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
    # d k(a,b)/da = k(a,b) * (b - a) / sigma^2
    gxx = (kxx @ x - kxx.sum(axis=1)[:, None] * x) / (n * n)
    gxy = (kxy @ y - kxy.sum(axis=1)[:, None] * x) / (n * m)
    grad = (2.0 / sigma**2) * (gxx - gxy)
    return value, grad


def inter_loss(
    vis_groups: Mapping[int, np.ndarray],
    inf_groups: Mapping[int, np.ndarray],
    sigma: float | str,
    terms: Sequence[str] = ("visible", "infrared"),
) -> tuple[float, dict[int, np.ndarray], dict[int, np.ndarray], list[int]]:
    """Cluster-paired distribution alignment across modalities.

    For every label present with samples on both sides, adds
    1/2 * D(visible, sg(infrared)) and 1/2 * D(infrared, sg(visible)) with
    D = mmd2, averaged over the P used labels.  Gradients of the first term
    touch only visible rows and vice versa; ``terms`` restricts which halves
    are active (used to verify the stop-gradient contract).  Labels missing
    or empty on either side are skipped and reported.

    sigma may be a number or "median" for a per-pair median heuristic; the
    bandwidth is treated as a constant inside the gradient either way.
    """
    keys = sorted(set(vis_groups) | set(inf_groups))
    shared = [
        k
        for k in keys
        if k in vis_groups and k in inf_groups and len(vis_groups[k]) and len(inf_groups[k])
    ]
    skipped = [k for k in keys if k not in shared]
    vis_grads: dict[int, np.ndarray] = {}
    inf_grads: dict[int, np.ndarray] = {}
    if not shared:
        return 0.0, vis_grads, inf_grads, skipped
    p = len(shared)
    total = 0.0
    for k in shared:
        xv = np.asarray(vis_groups[k], dtype=float)
        xr = np.asarray(inf_groups[k], dtype=float)
        s = median_sigma(xv, xr) if isinstance(sigma, str) else float(sigma)
        if "visible" in terms:
            val_v, grad_v = mmd2_grad_first(xv, xr, s)
            total += 0.5 * val_v
            vis_grads[k] = 0.5 * grad_v / p
        if "infrared" in terms:
            val_r, grad_r = mmd2_grad_first(xr, xv, s)
            total += 0.5 * val_r
            inf_grads[k] = 0.5 * grad_r / p
    return total / p, vis_grads, inf_grads, skipped
