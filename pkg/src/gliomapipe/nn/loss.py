from __future__ import annotations

import numpy as np

from ..errors import LabelError, ShapeError

# normal, necrotic, edema, enhancing
DEFAULT_CLASS_WEIGHTS = (1.0, 5.0, 2.0, 3.0)


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_weighted_ce(logits, targets, class_weights=DEFAULT_CLASS_WEIGHTS):
    """Class-weighted softmax cross-entropy, reduced as a weighted mean.

    ``loss = sum_p w[t_p] * -log softmax(z_p)[t_p] / sum_p w[t_p]``

    Returns ``(loss, grad_logits)``; the gradient has the dtype of ``logits``.
    Everything is accumulated in float64.
    """
    if logits.ndim != 4:
        raise ShapeError(f"logits must be (N, C, H, W), got {logits.shape}")
    n, c, h, w = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n, h, w):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise LabelError(f"targets must lie in 0..{c - 1}")
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (c,) or (weights <= 0).any():
        raise ValueError("class_weights must hold one positive weight per class")

    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    t = targets.astype(np.intp)[:, None]
    w_pix = weights[targets]
    total = w_pix.sum()
    nll = -np.take_along_axis(log_p, t, axis=1)[:, 0]
    loss = float((w_pix * nll).sum() / total)

    grad = np.exp(log_p)
    np.put_along_axis(grad, t, np.take_along_axis(grad, t, axis=1) - 1.0, axis=1)
    grad *= (w_pix / total)[:, None]
    return loss, grad.astype(logits.dtype)
