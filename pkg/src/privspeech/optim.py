"""Plain SGD and AdamW steps on named tensors.

Both update ``params`` in place (the arrays are large and the loops are hot).
"""

from __future__ import annotations

import numpy as np


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    for k, theta in params.items():
        theta -= lr * grads[k]
    return params


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: dict[str, tuple[np.ndarray, np.ndarray]],
    t: int,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One bias-corrected AdamW step with decoupled decay; ``t`` counts from 1."""
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, theta in params.items():
        g = grads[k]
        if k not in moments:
            moments[k] = (np.zeros_like(theta), np.zeros_like(theta))
        m, v = moments[k]
        tmp = np.multiply(g, 1.0 - beta1)
        m *= beta1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - beta2
        v *= beta2
        v += tmp
        # tmp <- lr * m_hat / (sqrt(v_hat) + eps)
        np.multiply(v, 1.0 / bc2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / bc1
        if weight_decay:
            theta *= 1.0 - lr * weight_decay
        theta -= tmp
    return params
