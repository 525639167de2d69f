"""Subgroup-count estimation and label-free scoring of clustering results."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .covariance import SpectralSummary, spectral_summary
from .errors import (
    BelowEdgeError,
    DegenerateDenominatorError,
    DimensionMismatchError,
    EmptyClusterError,
    InputError,
    WrongClusterCountError,
)


def default_dn(n: float) -> float:
    """1 / (log n)^2."""
    if not n > 1:
        raise InputError("n must exceed 1")
    return 1.0 / math.log(n) ** 2


def estimate_num_groups(summary: SpectralSummary | np.ndarray, d_n: float | None = None) -> int:
    """Number of eigenvalues at or above 2 + d_n, plus one."""
    ev = summary.eigenvalues if isinstance(summary, SpectralSummary) else np.asarray(summary, dtype=float)
    if d_n is None:
        if not isinstance(summary, SpectralSummary):
            raise InputError("d_n is required when passing raw eigenvalues")
        d_n = default_dn(summary.n)
    if not d_n > 0:
        raise InputError("d_n must be positive")
    return int(np.count_nonzero(ev >= 2.0 + d_n)) + 1


def alpha_hat(lambda_max: float) -> float:
    """Inverse of x + 1/x on [1, inf)."""
    lam = float(lambda_max)
    if lam < 2.0:
        raise BelowEdgeError(f"lambda={lam} is below the bulk edge 2")
    return 0.5 * (lam + math.sqrt(lam * lam - 4.0))


def _cluster_ids(labels, n_clusters=None):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DimensionMismatchError("labels must be one-dimensional")
    if n_clusters is None:
        ids = np.unique(labels)
    else:
        ids = np.arange(n_clusters)
        present = np.isin(ids, labels)
        if not present.all():
            raise EmptyClusterError(f"clusters {ids[~present].tolist()} have no members")
        if not np.isin(labels, ids).all():
            raise InputError("labels outside 0..n_clusters-1")
    return ids


def _cluster_means(X, labels, ids):
    onehot = (np.asarray(labels)[:, None] == ids[None, :]).astype(np.float64)
    counts = onehot.sum(axis=0)
    return (X @ onehot) / counts[None, :], counts


def alpha_check(X, labels_hat, a_hat: float, b_hat: float) -> float:
    """Spike estimate from the estimated two-cluster split."""
    X = np.asarray(X, dtype=np.float64)
    p, n = X.shape
    labels_hat = np.asarray(labels_hat)
    if labels_hat.size != n:
        raise DimensionMismatchError("one label per column is required")
    ids = np.unique(labels_hat)
    if ids.size < 2:
        raise EmptyClusterError("one of the two clusters is empty")
    if ids.size > 2:
        raise WrongClusterCountError(f"expected two clusters, got {ids.size}")
    means, counts = _cluster_means(X, labels_hat, ids)
    d = means[:, 0] - means[:, 1]
    n1, n2 = counts
    return float(math.sqrt(n / (p * b_hat)) * (n1 * n2 / n**2) * np.dot(d, d) - math.sqrt(p / (n * b_hat)) * a_hat)


def t0(acc: float, rec: float, k1: float) -> float:
    """Composite of accuracy and recall approximated by T."""
    if not (0.0 <= acc <= 1.0 and 0.0 <= rec <= 1.0):
        raise InputError("acc and rec must lie in [0, 1]")
    if not 0.0 < k1 <= 0.5:
        raise InputError("k1 must lie in (0, 1/2]")
    num = k1 * (1.0 - acc - k1 - rec + 2.0 * k1 * rec) ** 2
    f1 = 1.0 - acc - k1 + 2.0 * k1 * rec
    f2 = acc + k1 - 2.0 * k1 * rec
    den = (1.0 - k1) * f1 * f2
    if abs(den) < 1e-14:
        raise DegenerateDenominatorError(f"T0 denominator vanishes at acc={acc}, rec={rec}, k1={k1}")
    return num / den


def t0_bounds(acc: float, k1: float) -> tuple[float, float]:
    """(min over REC, max over REC) of T0 at fixed accuracy, clamped to [0, 1]."""
    if not 0.0 <= acc <= 1.0:
        raise InputError("acc must lie in [0, 1]")
    if not 0.0 < k1 <= 0.5:
        raise InputError("k1 must lie in (0, 1/2]")
    d = acc - k1
    hi = (k1 / (1.0 - k1)) * d / (1.0 - d)
    if k1 < 0.5 and k1 + acc <= 1.0:
        lo = 0.0
    else:
        lo = ((k1 - acc) / k1) * ((1.0 - k1 - acc) / (1.0 - k1))
    clamp = lambda v: min(1.0, max(0.0, v))
    return clamp(lo), clamp(hi)


@dataclass
class LabelMetrics:
    acc: float
    rec: float
    pre: float
    k1: float
    reoriented: bool  # truth cluster "1" was switched to the smaller group
    flipped: bool  # predicted ids were swapped to best match the truth


def label_metrics(truth, pred) -> LabelMetrics:
    """ACC/REC/PRE with cluster 1 the smaller true group and the best id matching."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise DimensionMismatchError("truth and prediction lengths differ")
    t_ids = np.unique(truth)
    p_ids = np.unique(pred)
    if t_ids.size != 2:
        raise WrongClusterCountError("truth must have exactly two clusters")
    if p_ids.size > 2:
        raise WrongClusterCountError("prediction must have at most two clusters")
    n = truth.size
    counts = np.array([(truth == t).sum() for t in t_ids])
    first = 0
    reoriented = False
    if counts[0] > counts[1]:
        first, reoriented = 1, True
    one = truth == t_ids[first]
    k1 = one.sum() / n
    best = None
    for flip, cand in enumerate(p_ids if p_ids.size == 2 else [p_ids[0], None]):
        p_one = pred == cand
        acc = (np.sum(p_one & one) + np.sum(~p_one & ~one)) / n
        if best is None or acc > best[0]:
            best = (acc, p_one, bool(flip))
    acc, p_one, flipped = best
    rec = np.sum(p_one & one) / one.sum()
    pre = np.sum(p_one & one) / p_one.sum() if p_one.any() else 0.0
    return LabelMetrics(float(acc), float(rec), float(pre), float(k1), reoriented, flipped)


@dataclass
class ClusterScore:
    T: float
    alpha_hat: float
    alpha_check: float
    tau_used: int
    kind: str = "T"
    t0: float | None = None
    t0_bounds: tuple[float, float] | None = None
    metrics: LabelMetrics | None = None
    excluded: list[int] = field(default_factory=list)  # spikes at or below 2, left out of T_tau

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = "spikelab/v1"
        if self.t0_bounds is not None:
            d["t0_bounds"] = list(self.t0_bounds)
        return d


def _attach_truth(score: ClusterScore, labels_hat, truth):
    m = label_metrics(truth, labels_hat)
    score.metrics = m
    try:
        score.t0 = t0(m.acc, m.rec, m.k1)
    except DegenerateDenominatorError:
        score.t0 = None
    score.t0_bounds = t0_bounds(m.acc, m.k1)
    return score


def t_statistic(X, labels_hat, truth=None, summary: SpectralSummary | None = None) -> ClusterScore:
    """T = alpha_check / alpha_hat for a two-cluster labeling."""
    X = np.asarray(X, dtype=np.float64)
    if summary is None:
        summary = spectral_summary(X)
    lam = float(summary.eigenvalues[0])
    if lam <= 2.0:
        raise BelowEdgeError(f"largest eigenvalue {lam:.4f} is not above 2; no usable spike")
    ah = alpha_hat(lam)
    ac = alpha_check(X, labels_hat, summary.a_hat, summary.b_hat)
    score = ClusterScore(ac / ah, ah, ac, 2, "T")
    if truth is not None:
        _attach_truth(score, labels_hat, truth)
    return score


def t_tau(X, labels_hat, n_clusters: int | None = None, summary: SpectralSummary | None = None) -> ClusterScore:
    """tr(Sigma_tau) over the summed spike estimates, for any number of clusters."""
    X = np.asarray(X, dtype=np.float64)
    p, n = X.shape
    labels_hat = np.asarray(labels_hat)
    if labels_hat.size != n:
        raise DimensionMismatchError("one label per column is required")
    ids = _cluster_ids(labels_hat, n_clusters)
    tau = ids.size
    if tau < 2:
        raise EmptyClusterError("need at least two nonempty clusters")
    if summary is None:
        summary = spectral_summary(X)
    lams = summary.eigenvalues[: tau - 1]
    keep = lams > 2.0
    if not keep.any():
        raise BelowEdgeError("no spike above 2; T_tau undefined")
    excluded = [int(i) for i in np.flatnonzero(~keep)]
    ahs = [alpha_hat(l) for l in lams[keep]]
    means, counts = _cluster_means(X, labels_hat, ids)
    sk = np.sqrt(counts / n)
    Gm = (means * sk[None, :]).T @ (means * sk[None, :])
    Nc = np.eye(tau) - np.outer(sk, sk)
    a_hat, b_hat = summary.a_hat, summary.b_hat
    tr = math.sqrt(n / (p * b_hat)) * np.trace(Nc @ Gm @ Nc) - math.sqrt(p / (n * b_hat)) * a_hat * np.trace(Nc)
    denom = float(np.sum(ahs))
    return ClusterScore(float(tr / denom), denom, float(tr), tau, "T_tau", excluded=excluded)


def constructed_labels(n1: int, n2: int, acc: float, rec: float) -> np.ndarray:
    """Labels (0 = cluster 1) with the requested ACC and REC against contiguous truth.

    The first (1 - rec) n1 members of cluster 1 and enough leading members of
    cluster 2 are mislabeled.
    """
    n = n1 + n2
    wrong1 = int(round((1.0 - rec) * n1))
    wrong = int(round((1.0 - acc) * n))
    wrong2 = wrong - wrong1
    if not (0 <= wrong1 <= n1 and 0 <= wrong2 <= n2):
        raise InputError(f"acc={acc}, rec={rec} is not achievable with n1={n1}, n2={n2}")
    lab = np.concatenate([np.zeros(n1, int), np.ones(n2, int)])
    lab[:wrong1] = 1
    lab[n1:n1 + wrong2] = 0
    return lab
