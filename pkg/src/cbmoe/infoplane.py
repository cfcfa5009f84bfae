"""Information-plane pipeline: Gaussian parametric mutual-information
estimation with PCA pre-reduction, plus trajectory truncation, monotonic
filtering, and Gaussian smoothing.

Entropies are Gaussian differential entropies from maximum-likelihood
covariances (divide by N) regularized with eps*I; an entropy whose
regularized log-determinant term is non-positive is clamped to 0, and the
mutual information is clamped to 0 as well, so I(C;Y) <= H(C) always
holds. All quantities are in nats. H(C) doubles as the capacity proxy:
for a deterministic feature map it upper-bounds I(X;C).
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

PCA_EPS = 1e-3
PCA_MAX_COMPONENTS = 20
SMOOTH_SIGMA = 2.0
TRUNCATION_BUFFER = 3


@dataclass
class MIPoint:
    epoch: int
    h_c: float      # capacity proxy, nats
    i_cy: float     # task information, nats
    raw_dim: int
    k_prime: int
    n: int


@dataclass
class PCAReport:
    raw_dim: int
    n: int
    k: int
    effective_rank: int
    k_prime: int
    eigenvalues: np.ndarray


def _canonical_rows(X: np.ndarray) -> np.ndarray:
    """Rows in lexicographic order; moments computed over this copy are
    bit-identical under any permutation of the input rows."""
    return X[np.lexsort(X.T[::-1])]


def _ml_mean_cov(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Xs = _canonical_rows(np.asarray(X, dtype=np.float64))
    mean = Xs.mean(axis=0, keepdims=True)
    Xc = Xs - mean
    return mean, (Xc.T @ Xc) / Xs.shape[0]


def pca_reduce(features: np.ndarray, eps: float = PCA_EPS
               ) -> tuple[np.ndarray, PCAReport]:
    """Center and project onto the leading principal components.

    The target dimension is k = min(20, d, floor(N/4)), further limited by
    the effective rank (eigenvalues exceeding 10*eps) and floored at 2.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be (N, d)")
    n, d = X.shape
    if n < 8:
        raise ValueError(f"need at least 8 samples for PCA reduction, got {n}")
    if d < 2:
        raise ValueError("features must have at least 2 dimensions")
    mean, cov = _ml_mean_cov(X)
    Xc = X - mean
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(-eigvals, kind="stable")
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    k = min(PCA_MAX_COMPONENTS, d, n // 4)
    effective_rank = int(np.sum(eigvals > 10.0 * eps))
    k_prime = max(2, min(k, effective_rank))
    reduced = Xc @ eigvecs[:, :k_prime]
    return reduced, PCAReport(raw_dim=d, n=n, k=k, effective_rank=effective_rank,
                              k_prime=k_prime, eigenvalues=eigvals)


def _gaussian_entropy(cov: np.ndarray, eps: float) -> float:
    """0.5 * logdet(2*pi*e*(cov + eps I)) in nats, clamped at 0."""
    k = cov.shape[0]
    reg = cov + eps * np.eye(k)
    sign, logdet = np.linalg.slogdet(reg)
    if sign <= 0:
        return 0.0
    h = 0.5 * (k * np.log(2.0 * np.pi * np.e) + logdet)
    return max(0.0, h)


def gaussian_mi(features: np.ndarray, labels, eps: float = PCA_EPS
                ) -> tuple[float, float]:
    """(H(C), I(C;Y)) from Gaussian entropies of ML covariances.

    I(C;Y) = H(C) - sum_l p(Y=l) H(C|Y=l). A class with fewer than 2
    samples falls back to the pooled covariance for its conditional
    entropy (with a warning) rather than a degenerate fit.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.shape[0] != y.shape[0] or X.shape[0] < 2:
        raise ValueError("features/labels must align and hold >= 2 samples")
    n = X.shape[0]
    _, pooled_cov = _ml_mean_cov(X)
    h_c = _gaussian_entropy(pooled_cov, eps)
    cond = 0.0
    for cls in np.unique(y):
        members = X[y == cls]
        p_cls = members.shape[0] / n
        if members.shape[0] < 2:
            warnings.warn(f"class {cls!r} has {members.shape[0]} sample(s); "
                          "using pooled covariance for its conditional entropy")
            cov = pooled_cov
        else:
            _, cov = _ml_mean_cov(members)
        cond += p_cls * _gaussian_entropy(cov, eps)
    i_cy = max(0.0, h_c - cond)
    return h_c, i_cy


# trajectory post-processing -------------------------------------------------

TRAJECTORY_KINDS = ("cem", "cbm", "latent")


def _truncate_at_peak(points: list[MIPoint], buffer: int) -> list[MIPoint]:
    peak_idx = int(np.argmax([p.i_cy for p in points]))
    cutoff = points[peak_idx].epoch + buffer
    return [p for p in points if p.epoch <= cutoff]


def _monotonic_filter(points: list[MIPoint]) -> list[MIPoint]:
    kept = [points[0]]
    for p in points[1:]:
        if p.h_c > kept[-1].h_c and p.i_cy > kept[-1].i_cy:
            kept.append(p)
    return kept


def _gaussian_smooth(points: list[MIPoint], sigma: float) -> list[MIPoint]:
    epochs = np.array([p.epoch for p in points], dtype=np.float64)
    h = np.array([p.h_c for p in points])
    i = np.array([p.i_cy for p in points])
    w = np.exp(-((epochs[:, None] - epochs[None, :]) ** 2) / (2.0 * sigma ** 2))
    w /= w.sum(axis=1, keepdims=True)
    h_s, i_s = w @ h, w @ i
    return [MIPoint(epoch=p.epoch, h_c=float(h_s[j]), i_cy=float(i_s[j]),
                    raw_dim=p.raw_dim, k_prime=p.k_prime, n=p.n)
            for j, p in enumerate(points)]


def trajectory_postprocess(points: list[MIPoint], kind: str) -> list[MIPoint]:
    """Truncate (cem/latent), monotonic-filter (cem only), then smooth.

    Truncation keeps epochs up to the first peak of I(C;Y) plus a 3-epoch
    buffer; when the peak is the final epoch the series is kept whole. The
    monotonic filter retains points where both coordinates strictly
    increase relative to the previous retained point. Smoothing is a
    normalized Gaussian kernel over epoch distance (sigma = 2.0 epochs)
    applied to both coordinates. Scalar-bottleneck (cbm) trajectories are
    never truncated or filtered.
    """
    if kind not in TRAJECTORY_KINDS:
        raise ValueError(f"kind must be one of {TRAJECTORY_KINDS}")
    if not points:
        raise ValueError("empty trajectory")
    points = sorted(points, key=lambda p: p.epoch)
    if len(points) == 1:
        return list(points)
    if kind in ("cem", "latent"):
        points = _truncate_at_peak(points, TRUNCATION_BUFFER)
    if kind == "cem":
        points = _monotonic_filter(points)
    if len(points) == 1:
        return points
    return _gaussian_smooth(points, SMOOTH_SIGMA)


# assembling the plane from trainer dumps ----------------------------------------

TRACKED_FEATURES = ("z", "b1", "b2", "p1", "p2")


def build_plane(dumps_by_fold: list[list[dict]], tracked_feature: str,
                eps: float = PCA_EPS) -> tuple[list[MIPoint], list[int]]:
    """Pool dump records across folds per epoch and estimate one MIPoint each.

    Returns (points, missing_epochs); epochs inside the covered range with
    no records anywhere are reported, never interpolated.
    """
    if tracked_feature not in TRACKED_FEATURES:
        raise ValueError(f"tracked_feature must be one of {TRACKED_FEATURES}")
    by_epoch: dict[int, list[dict]] = {}
    for fold_dumps in dumps_by_fold:
        for dump in fold_dumps:
            by_epoch.setdefault(int(dump["epoch"]), []).extend(dump["records"])
    if not by_epoch:
        raise ValueError("no dump records supplied")
    epochs = sorted(by_epoch)
    missing = [e for e in range(epochs[0], epochs[-1] + 1) if e not in by_epoch]
    points = []
    for epoch in epochs:
        records = by_epoch[epoch]
        absent = [r for r in records if tracked_feature not in r]
        if absent:
            raise ValueError(f"records at epoch {epoch} lack feature "
                             f"{tracked_feature!r}")
        X = np.asarray([r[tracked_feature] for r in records], dtype=np.float64)
        y = np.asarray([r["label"] for r in records])
        reduced, report = pca_reduce(X, eps=eps)
        h_c, i_cy = gaussian_mi(reduced, y, eps=eps)
        points.append(MIPoint(epoch=epoch, h_c=h_c, i_cy=i_cy,
                              raw_dim=report.raw_dim, k_prime=report.k_prime,
                              n=report.n))
    return points, missing


def plane_to_csv(points: list[MIPoint], kind: str,
                 meta_line: str | None = None) -> str:
    buf = io.StringIO()
    if meta_line:
        buf.write(meta_line.rstrip("\n") + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "H_C", "I_CY", "k_prime", "N", "kind"])
    for p in points:
        writer.writerow([p.epoch, repr(p.h_c), repr(p.i_cy), p.k_prime, p.n, kind])
    return buf.getvalue()
