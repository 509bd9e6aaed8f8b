"""Loss values with their analytic gradients.

All losses are batch means. ``cosine_orthogonality_loss`` differentiates with
respect to the codes only; the subsidiary weights are a constant there.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import NumericError, ShapeError
from .tensor_core import as_matrix

COS_EPS = 1e-12


class LossResult(NamedTuple):
    value: float
    grad: np.ndarray


def _check_labels(labels, n_classes: int, batch: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != batch:
        raise ShapeError(f"{y.shape[0]} labels for a batch of {batch}")
    if batch < 1:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cce(logits, labels) -> LossResult:
    logits = as_matrix(logits)
    batch, n = logits.shape
    y = _check_labels(labels, n, batch)
    logp = log_softmax(logits)
    value = -logp[np.arange(batch), y].mean()
    grad = np.exp(logp)
    grad[np.arange(batch), y] -= 1.0
    grad /= batch
    if not np.isfinite(value):
        raise NumericError("cross entropy is not finite")
    return LossResult(float(value), grad)


def reversed_cce(logits, labels) -> LossResult:
    value, grad = softmax_cce(logits, labels)
    return LossResult(-value, -grad)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError(f"vector lengths differ: {u.shape[0]} vs {v.shape[0]}")
    cs = u @ v / (np.linalg.norm(u) * np.linalg.norm(v) + COS_EPS)
    return float(np.clip(cs, -1.0, 1.0))


def cosine_matrix(w_s, codes) -> np.ndarray:
    """Cosine similarity of every code row against every weight row, shape (batch, N^S)."""
    w_s = as_matrix(w_s)
    codes = as_matrix(codes)
    if w_s.shape[1] != codes.shape[1]:
        raise ShapeError(f"weight width {w_s.shape[1]} != code width {codes.shape[1]}")
    wn = np.linalg.norm(w_s, axis=1)
    en = np.linalg.norm(codes, axis=1)
    cs = (codes @ w_s.T) / (en[:, None] * wn[None, :] + COS_EPS)
    return np.clip(cs, -1.0, 1.0)


def cosine_orthogonality_loss(w_s, codes) -> LossResult:
    """Mean over (example, weight row) of the squared cosine similarity.

    The gradient is taken with respect to ``codes``.
    """
    w_s = as_matrix(w_s)
    codes = as_matrix(codes)
    if w_s.shape[1] != codes.shape[1]:
        raise ShapeError(f"weight width {w_s.shape[1]} != code width {codes.shape[1]}")
    batch, n_s = codes.shape[0], w_s.shape[0]
    wn = np.linalg.norm(w_s, axis=1)
    en = np.linalg.norm(codes, axis=1)
    dots = codes @ w_s.T
    denom = en[:, None] * wn[None, :] + COS_EPS
    cs = dots / denom
    value = float(np.mean(np.clip(cs, -1.0, 1.0) ** 2))

    # d cs_ij / d e_i = w_j / denom_ij - dots_ij * wn_j * e_i / (en_i * denom_ij^2)
    scale = 2.0 * cs / (batch * n_s)
    a = scale / denom
    grad = a @ w_s
    safe_en = np.where(en > 0, en, 1.0)
    b = (scale * dots * wn[None, :] / denom**2).sum(axis=1) / safe_en
    grad -= b[:, None] * codes
    return LossResult(value, grad)


def grl_scale(grad, lam: float = 1.0) -> np.ndarray:
    """Backward rule of a gradient reversal layer."""
    if not np.isfinite(lam):
        raise ValueError("lambda must be finite")
    return -lam * as_matrix(grad)
