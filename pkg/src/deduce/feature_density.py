"""Class-conditional Gaussian density over network features.

One full-covariance Gaussian per class, mixed with uniform weights. The
negative log-likelihood of the mixture is the epistemic uncertainty score;
the per-class log density of the target class drives the counterfactual
search.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import logsumexp
from scipy.stats import rankdata

from .errors import InputError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class FeatureGMM:
    mean: np.ndarray        # (C, d)
    cov: np.ndarray         # (C, d, d)
    precision: np.ndarray   # (C, d, d)
    log_norm: np.ndarray    # (C,)
    nll_threshold: float | None = None  # 95th percentile of training NLL

    @property
    def class_count(self):
        return self.mean.shape[0]

    @property
    def dim(self):
        return self.mean.shape[1]

    @property
    def log_weights(self):
        return np.full(self.class_count, -np.log(self.class_count))

    def to_tensors(self):
        out = {}
        for c in range(self.class_count):
            out[f"gmm.mean.{c}"] = self.mean[c]
            out[f"gmm.cov.{c}"] = self.cov[c]
        if self.nll_threshold is not None:
            out["gmm.nll_p95"] = np.array(self.nll_threshold)
        return out

    @classmethod
    def from_tensors(cls, tensors):
        means, covs = [], []
        c = 0
        while f"gmm.mean.{c}" in tensors:
            means.append(tensors[f"gmm.mean.{c}"])
            covs.append(tensors[f"gmm.cov.{c}"])
            c += 1
        if not means:
            return None
        thr = tensors.get("gmm.nll_p95")
        return from_covariances(np.array(means), np.array(covs),
                                None if thr is None else float(thr))


def _factorize(cov, max_retries=3):
    """Cholesky with escalating diagonal jitter on failure."""
    d = cov.shape[0]
    extra = 1e-8 * max(np.trace(cov) / d, 1.0)
    for attempt in range(max_retries + 1):
        try:
            return cov, linalg.cho_factor(cov, lower=True)
        except linalg.LinAlgError:
            if attempt == max_retries:
                raise
            cov = cov + extra * np.eye(d)
            extra *= 10.0


def from_covariances(means, covs, nll_threshold=None):
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    C, d = means.shape
    precisions = np.empty_like(covs)
    log_norms = np.empty(C)
    fixed = np.empty_like(covs)
    for c in range(C):
        cov, factor = _factorize(covs[c])
        fixed[c] = cov
        prec = linalg.cho_solve(factor, np.eye(d))
        precisions[c] = 0.5 * (prec + prec.T)
        logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
        log_norms[c] = -0.5 * (d * LOG_2PI + logdet)
    return FeatureGMM(means, fixed, precisions, log_norms, nll_threshold)


def fit(features, labels, num_classes=None, jitter=1e-4, jitter_floor=1e-8):
    """Fit one Gaussian per class to labelled feature vectors.

    Covariance uses the 1/N_c estimator plus eps*I with
    eps = max(jitter * trace(cov) / d, jitter_floor).
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or len(labels) != features.shape[0]:
        raise InputError("features must be (N, d) with one label per row")
    if not np.all(np.isfinite(features)):
        raise InputError("non-finite feature value")
    n, d = features.shape
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=num_classes)
    short = [f"class {c}: {counts[c]} < {d + 1}" for c in range(num_classes)
             if counts[c] < d + 1]
    if short:
        raise InputError("too few samples to fit covariance (" + "; ".join(short) + ")")

    means = np.empty((num_classes, d))
    covs = np.empty((num_classes, d, d))
    for c in range(num_classes):
        fc = features[labels == c]
        # sorted rows make the sums independent of sample order
        fc = fc[np.lexsort(fc.T[::-1])]
        mu = fc.mean(axis=0)
        centered = fc - mu
        cov = centered.T @ centered / len(fc)
        cov = 0.5 * (cov + cov.T)
        eps = max(jitter * np.trace(cov) / d, jitter_floor)
        means[c] = mu
        covs[c] = cov + eps * np.eye(d)
    return from_covariances(means, covs)


def log_density_class(gmm: FeatureGMM, z, t):
    diff = np.asarray(z, dtype=np.float64) - gmm.mean[t]
    return float(gmm.log_norm[t] - 0.5 * diff @ gmm.precision[t] @ diff)


def log_density_all(gmm: FeatureGMM, Z):
    """Per-class log densities for a batch: (N, C)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    out = np.empty((Z.shape[0], gmm.class_count))
    for c in range(gmm.class_count):
        diff = Z - gmm.mean[c]
        maha = np.einsum("ni,ij,nj->n", diff, gmm.precision[c], diff)
        out[:, c] = gmm.log_norm[c] - 0.5 * maha
    return out


def grad_log_density_class(gmm: FeatureGMM, z, t):
    diff = np.asarray(z, dtype=np.float64) - gmm.mean[t]
    return -(gmm.precision[t] @ diff)


def epistemic_nll(gmm: FeatureGMM, z):
    """-log of the uniform mixture density at z (scalar or per-row array)."""
    z = np.asarray(z, dtype=np.float64)
    lp = log_density_all(gmm, z) + gmm.log_weights
    nll = -logsumexp(lp, axis=1)
    return float(nll[0]) if z.ndim == 1 else nll


def with_threshold(gmm: FeatureGMM, train_features, q=95.0):
    thr = float(np.percentile(epistemic_nll(gmm, train_features), q))
    return FeatureGMM(gmm.mean, gmm.cov, gmm.precision, gmm.log_norm, thr)


def auroc(scores_neg, scores_pos):
    """Probability a positive scores above a negative (ties count half)."""
    neg = np.asarray(scores_neg, dtype=np.float64)
    pos = np.asarray(scores_pos, dtype=np.float64)
    ranks = rankdata(np.concatenate([neg, pos]))
    r_pos = ranks[len(neg):].sum()
    return float((r_pos - len(pos) * (len(pos) + 1) / 2.0) / (len(pos) * len(neg)))
