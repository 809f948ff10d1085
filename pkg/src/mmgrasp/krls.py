"""Kernel regularized least squares, multi-class via one-hot regression.

Training solves (G + lambda I) alpha = Y for a one-hot target matrix Y in a
single symmetric positive-definite factorization, reused across all class
columns.  Prediction is the usual kernel expansion followed by an argmax
with ties broken toward the lowest class index (so rest, class 0, wins).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .kernels import KernelConfig

RESIDUAL_TOL = 1e-8
_MAX_REFINE = 3


@dataclass
class TrainedModel:
    """KRLS coefficients plus everything needed to predict new samples."""

    alpha: np.ndarray          # [N, K]
    classes: np.ndarray        # [K] class ids, column order of alpha
    lam: float
    cfg: Optional[KernelConfig] = None
    train_emg: Optional[np.ndarray] = None
    train_vis: Optional[np.ndarray] = None
    train_hash: Optional[str] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_train(self):
        return self.alpha.shape[0]

    @property
    def n_classes(self):
        return self.alpha.shape[1]


def one_hot(labels, n_classes):
    """[N, K] one-hot matrix for integer class ids 0..n_classes-1."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError("labels must be 1-D")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("label outside [0, n_classes)")
    Y = np.zeros((labels.size, n_classes), dtype=np.float64)
    Y[np.arange(labels.size), labels] = 1.0
    return Y


def train(G, labels, lam, n_classes=None):
    """Fit KRLS coefficients on a precomputed training Gram matrix.

    Parameters
    ----------
    G : [N, N] symmetric PSD Gram matrix
    labels : [N] integer class ids
    lam : regularization, > 0
    n_classes : number of classes K; defaults to max(labels) + 1

    Returns
    -------
    TrainedModel with ``alpha`` solving (G + lam I) alpha = one_hot(labels).

    The solve is Cholesky-based with iterative refinement; it raises if the
    system cannot be factorized or the residual stays above tolerance.
    """
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError(f"Gram matrix must be square, got {G.shape}")
    if not np.isfinite(G).all():
        raise ValueError("Gram matrix contains non-finite entries")
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != G.shape[0]:
        raise ValueError("label count does not match Gram size")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 1

    Y = one_hot(labels, n_classes)
    A = G + lam * np.eye(G.shape[0])
    try:
        factor = cho_factor(A, lower=True, overwrite_a=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"KRLS solve failed: {exc}") from exc

    alpha = cho_solve(factor, Y, check_finite=False)
    # one factorization, K right-hand sides; refine while the residual is loose
    for _ in range(_MAX_REFINE):
        resid = Y - (G @ alpha + lam * alpha)
        if np.abs(resid).max() <= RESIDUAL_TOL:
            break
        alpha = alpha + cho_solve(factor, resid, check_finite=False)
    else:
        resid = Y - (G @ alpha + lam * alpha)
        if np.abs(resid).max() > RESIDUAL_TOL:
            raise ValueError(
                f"KRLS residual {np.abs(resid).max():.3e} above {RESIDUAL_TOL:.0e}"
            )
    if not np.isfinite(alpha).all():
        raise ValueError("KRLS solve produced non-finite coefficients")

    return TrainedModel(alpha=alpha, classes=np.arange(n_classes), lam=float(lam))


def predict(model: TrainedModel, G_test):
    """Kernel-expansion prediction from a test-vs-train Gram matrix.

    Returns
    -------
    scores : [M, K] decision values, ``G_test @ alpha``
    classes : [M] predicted class ids; argmax over K, lowest index on ties
    """
    G_test = np.asarray(G_test, dtype=np.float64)
    if G_test.ndim != 2 or G_test.shape[1] != model.n_train:
        raise ValueError(
            f"test Gram has shape {G_test.shape}, expected [M, {model.n_train}]"
        )
    scores = G_test @ model.alpha
    idx = np.argmax(scores, axis=1)  # np.argmax returns the first maximum
    return scores, model.classes[idx]


def dataset_hash(emg, vis):
    """Stable content hash of a training set, stored with saved models."""
    h = hashlib.sha256()
    for arr in (emg, vis):
        a = np.ascontiguousarray(arr, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_model(model: TrainedModel, path):
    """Serialize a model (coefficients, kernel config, training features)."""
    if model.cfg is None or model.train_emg is None or model.train_vis is None:
        raise ValueError("model is missing training-set reference; cannot save")
    np.savez(
        path,
        alpha=model.alpha,
        classes=model.classes,
        lam=np.float64(model.lam),
        kernel=np.array(
            [model.cfg.gamma_chi2, model.cfg.gamma_rbf, model.cfg.w_emg, model.cfg.w_cnn]
        ),
        train_emg=model.train_emg,
        train_vis=model.train_vis,
        train_hash=np.bytes_(model.train_hash.encode()),
    )


def load_model(path) -> TrainedModel:
    with np.load(path) as z:
        g_chi2, g_rbf, w_emg, w_cnn = z["kernel"]
        model = TrainedModel(
            alpha=z["alpha"],
            classes=z["classes"],
            lam=float(z["lam"]),
            cfg=KernelConfig(float(g_chi2), float(g_rbf), float(w_emg), float(w_cnn)),
            train_emg=z["train_emg"],
            train_vis=z["train_vis"],
            train_hash=bytes(z["train_hash"]).decode(),
        )
    expected = dataset_hash(model.train_emg, model.train_vis)
    if expected != model.train_hash:
        raise ValueError("training-set hash mismatch in saved model")
    return model
