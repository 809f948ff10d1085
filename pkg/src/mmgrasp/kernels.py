"""Cue-specific kernels and their weighted combination.

The similarity between two multicue samples is a convex combination of an
exp-chi2 kernel on the (nonnegative) EMG wavelet marginals and an RBF kernel
on the visual feature vectors.  Both component kernels map into [0, 1], so
the combined kernel does too as long as the weights sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class KernelConfig:
    """Parameters of the multi-cue kernel."""

    gamma_chi2: float
    gamma_rbf: float
    w_emg: float
    w_cnn: float

    def __post_init__(self):
        if not (self.gamma_chi2 > 0 and self.gamma_rbf > 0):
            raise ValueError("kernel bandwidths must be positive")
        if not (0.0 <= self.w_emg <= 1.0 and 0.0 <= self.w_cnn <= 1.0):
            raise ValueError("kernel weights must lie in [0, 1]")
        if abs(self.w_emg + self.w_cnn - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(
                f"kernel weights must sum to 1, got {self.w_emg + self.w_cnn!r}"
            )


def k_chi2(x, y, gamma):
    """exp-chi2 kernel between two nonnegative vectors.

    k(x, y) = exp(-gamma * sum_i (x_i - y_i)^2 / (x_i + y_i)), where a
    0/0 summand contributes 0.

    Parameters
    ----------
    x, y : array-like, nonnegative, same length
    gamma : float > 0

    Returns
    -------
    float in [0, 1]
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if np.any(x < 0) or np.any(y < 0):
        raise ValueError("exp-chi2 kernel requires nonnegative inputs")
    den = x + y
    num = (x - y) ** 2
    mask = den > 0
    d = float(np.sum(num[mask] / den[mask]))
    return float(np.exp(-gamma * d))


def k_rbf(x, y, gamma):
    """Gaussian RBF kernel exp(-gamma * ||x - y||^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.exp(-gamma * np.dot(d, d)))


def k_multicue(a, b, cfg: KernelConfig):
    """Weighted sum of the cue-specific kernels for two multicue samples.

    ``a`` and ``b`` carry ``emg_feat`` and ``vis_feat`` attributes (see
    :mod:`mmgrasp.features`).
    """
    val = 0.0
    if cfg.w_emg != 0.0:
        val += cfg.w_emg * k_chi2(a.emg_feat, b.emg_feat, cfg.gamma_chi2)
    if cfg.w_cnn != 0.0:
        val += cfg.w_cnn * k_rbf(a.vis_feat, b.vis_feat, cfg.gamma_rbf)
    return val


@njit(parallel=True, cache=True)
def _chi2_distance(A, B):  # pragma: no cover - exercised via chi2_gram
    n, d = A.shape
    m = B.shape[0]
    out = np.empty((n, m), dtype=np.float64)
    for i in prange(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                den = A[i, k] + B[j, k]
                if den > 0.0:
                    diff = A[i, k] - B[j, k]
                    s += diff * diff / den
            out[i, j] = s
    return out


def chi2_gram(A, B, gamma):
    """exp-chi2 Gram matrix between the rows of two nonnegative matrices."""
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"feature dims differ: {A.shape[1]} vs {B.shape[1]}")
    if np.any(A < 0) or np.any(B < 0):
        raise ValueError("exp-chi2 kernel requires nonnegative inputs")
    return np.exp(-gamma * _chi2_distance(A, B))


def rbf_gram(A, B, gamma):
    """RBF Gram matrix between the rows of two matrices.

    Squared distances come from the usual dot-product expansion; tiny
    negative values from cancellation are clamped to zero, and the diagonal
    is exactly zero when ``A is B``.
    """
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"feature dims differ: {A.shape[1]} vs {B.shape[1]}")
    sq_a = np.einsum("ij,ij->i", A, A)
    sq_b = sq_a if B is A else np.einsum("ij,ij->i", B, B)
    d2 = sq_a[:, None] + sq_b[None, :] - 2.0 * (A @ B.T)
    np.maximum(d2, 0.0, out=d2)
    if B is A:
        np.fill_diagonal(d2, 0.0)
    return np.exp(-gamma * d2)


def gram(A, B, cfg: KernelConfig):
    """Multi-cue Gram matrix G[i, j] = k_mc(A_i, B_j).

    ``A`` and ``B`` are :class:`~mmgrasp.features.MulticueDataset` objects
    (or anything exposing ``emg`` and ``vis`` row matrices).

    Component Grams are skipped when their weight is zero, so single-cue
    configurations pay only for the kernel they use.
    """
    G = None
    if cfg.w_emg != 0.0:
        G = cfg.w_emg * chi2_gram(A.emg, B.emg, cfg.gamma_chi2)
    if cfg.w_cnn != 0.0:
        Gv = cfg.w_cnn * rbf_gram(A.vis, B.vis, cfg.gamma_rbf)
        G = Gv if G is None else G + Gv
    if G is None:
        raise ValueError("both kernel weights are zero")
    return G
