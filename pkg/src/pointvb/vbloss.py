"""Redundancy-reduction loss on the cross-channel correlation matrix,
with exact gradients through the column normalization, plus Gaussian
entropy / log-det diagnostics for the information-theoretic objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .nncore import normalize_columns


@dataclass
class VbConfig:
    """Loss hyperparameters: off-diagonal weight and normalization guard."""

    off_diagonal_weight: float = 1.0 / 64.0
    epsilon: float = 1e-12
    squared_norm: bool = False  # smoother near the optimum, off by default

    def __post_init__(self):
        if self.off_diagonal_weight <= 0:
            raise DataError("off_diagonal_weight must be positive")


@dataclass
class CrossCorrelation:
    """D x D matrix of per-channel correlations between two feature views."""

    z: np.ndarray

    def __post_init__(self):
        self.z = np.ascontiguousarray(self.z, dtype=np.float64)
        if self.z.ndim != 2 or self.z.shape[0] != self.z.shape[1]:
            raise DataError(f"cross-correlation must be square, got {self.z.shape}")


def cross_correlation(
    zp: np.ndarray, zq: np.ndarray, epsilon: float = 1e-12
) -> CrossCorrelation:
    """Column-normalize both views, then correlate channel pairs.

    Rows of zp and zq must describe the same sampled points under the two
    views; entries are cosine correlations in [-1, 1] up to rounding.
    """
    if zp.shape != zq.shape:
        raise DataError(f"view shapes differ: {zp.shape} vs {zq.shape}")
    a = normalize_columns(zp, epsilon)
    b = normalize_columns(zq, epsilon)
    return CrossCorrelation(a.T @ b)


def _scale_off_diagonal(z: np.ndarray, weight: float) -> np.ndarray:
    out = z * weight
    np.fill_diagonal(out, np.diagonal(z))
    return out


def vb_loss(z: CrossCorrelation, cfg: VbConfig) -> float:
    """Frobenius distance between the off-diagonal-scaled matrix and identity."""
    gamma = _scale_off_diagonal(z.z, cfg.off_diagonal_weight)
    residual = gamma - np.eye(len(gamma))
    sq = float(np.sum(residual**2))
    return sq if cfg.squared_norm else float(np.sqrt(sq))


def vb_loss_backward(
    zp: np.ndarray, zq: np.ndarray, cfg: VbConfig
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and its exact gradients w.r.t. the raw (pre-normalization) views.

    Chains through centering, the norm division, and the off-diagonal
    scaling. At an exact zero of the (unsquared) loss the gradient of the
    norm is undefined; zero gradients are returned by convention.
    """
    if zp.shape != zq.shape:
        raise DataError(f"view shapes differ: {zp.shape} vs {zq.shape}")
    eps = cfg.epsilon
    a = normalize_columns(zp, eps)
    b = normalize_columns(zq, eps)
    z = a.T @ b
    residual = _scale_off_diagonal(z, cfg.off_diagonal_weight) - np.eye(len(z))
    sq = float(np.sum(residual**2))
    if cfg.squared_norm:
        loss = sq
        dz = 2.0 * _scale_off_diagonal(residual, cfg.off_diagonal_weight)
    else:
        loss = float(np.sqrt(sq))
        if loss == 0.0:
            return 0.0, np.zeros_like(zp), np.zeros_like(zq)
        dz = _scale_off_diagonal(residual, cfg.off_diagonal_weight) / loss
    da = b @ dz.T
    db = a @ dz
    return loss, _normalize_columns_backward(zp, da, eps), \
        _normalize_columns_backward(zq, db, eps)


def _normalize_columns_backward(
    raw: np.ndarray, upstream: np.ndarray, epsilon: float
) -> np.ndarray:
    """Backprop through normalize_columns for each column independently."""
    centered = raw - raw.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(centered, axis=0, keepdims=True)
    clipped = np.maximum(norms, epsilon)
    y = centered / clipped
    # d/dcentered of (centered / max(norm, eps)); the norm term only flows
    # where the norm is not clipped at epsilon
    active = (norms > epsilon).astype(np.float64)
    dc = upstream / clipped - active * y * np.sum(y * upstream, axis=0,
                                                 keepdims=True) / clipped
    return dc - dc.mean(axis=0, keepdims=True)


def gaussian_entropy(covariance: np.ndarray) -> float:
    """Differential entropy 0.5 * (D ln(2 pi e) + ln det) of a Gaussian.

    The covariance must be symmetric positive definite; the determinant is
    taken from its Cholesky factor.
    """
    covariance = np.asarray(covariance, dtype=np.float64)
    if covariance.ndim != 2 or covariance.shape[0] != covariance.shape[1]:
        raise DataError(f"covariance must be square, got {covariance.shape}")
    if not np.allclose(covariance, covariance.T, atol=1e-10):
        raise NumericError("covariance is not symmetric")
    try:
        chol = np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError:
        raise NumericError("covariance is not positive definite") from None
    d = len(covariance)
    log_det = 2.0 * float(np.sum(np.log(np.diagonal(chol))))
    return 0.5 * (d * np.log(2.0 * np.pi * np.e) + log_det)


def _log_det_ridge(samples: np.ndarray, ridge: float) -> float:
    """ln det of the sample covariance of rows, ridge-regularized to PD."""
    n, d = samples.shape
    if n < d + 1:
        raise DataError(f"need at least D+1 = {d + 1} samples, got {n}")
    centered = samples - samples.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (n - 1) + ridge * np.eye(d)
    chol = np.linalg.cholesky(cov)
    return 2.0 * float(np.sum(np.log(np.diagonal(chol))))


def vb_objective_estimate(
    pooled_features: np.ndarray,
    per_input_views: list[list[np.ndarray]],
    beta: float,
    ridge: float = 1e-6,
) -> float:
    """Sample-covariance estimate of the information objective.

    pooled_features (N, D) are representation samples across all inputs
    and views, giving the marginal covariance term. per_input_views holds,
    for each input, its >= 2 view feature matrices (H, D) with
    corresponding rows; per-point across-view deviations estimate the
    conditional covariance given that input. Returns

        mean_inputs ln|Sigma_cond + ridge I| + (1 - beta)/beta * ln|Sigma + ridge I|

    Diagnostic only: identical views floor the first term at D * ln(ridge).
    """
    if beta <= 1.0:
        raise DataError("beta must exceed 1")
    conditional_terms = []
    for views in per_input_views:
        if len(views) < 2:
            raise DataError("need at least 2 views per input")
        stack = np.stack(views)                 # (V, H, D)
        deviations = stack - stack.mean(axis=0, keepdims=True)
        flat = deviations.reshape(-1, stack.shape[-1])
        conditional_terms.append(_log_det_ridge(flat, ridge))
    marginal = _log_det_ridge(np.asarray(pooled_features, dtype=np.float64), ridge)
    return float(np.mean(conditional_terms) + (1.0 - beta) / beta * marginal)
