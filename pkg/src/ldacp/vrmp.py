"""Proxy-label value regression: learn the ranking model's bias, divide it out.

The ranking model's aggregated conversion estimate z is biased but the bias
ratio (predicted over observed, "PCOC") sits in a narrow range with no long
tail, so it regresses well. The head predicts that ratio and converts it back
to a conversion count as z / ratio.
"""

from __future__ import annotations

import numpy as np

from .nn import sigmoid, softplus

PCOC_MIN = 0.1
PCOC_MAX = 10.0


def pcoc_label(z: np.ndarray | float, y: np.ndarray | float) -> np.ndarray:
    """Training label: z / y for converted campaigns, 1 for zero-conversion ones."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(z < 0) or np.any(y < 0):
        raise ValueError("z and y are nonnegative")
    return np.where(y > 0, z / np.where(y > 0, y, 1.0), 1.0)


def pcoc_from_raw(raw: np.ndarray) -> np.ndarray:
    """Head output -> positive ratio: softplus then clamp to [0.1, 10]."""
    return np.clip(softplus(np.asarray(raw, dtype=np.float64)), PCOC_MIN, PCOC_MAX)


def pcoc_raw_grad(raw: np.ndarray) -> np.ndarray:
    """d pcoc_hat / d raw; zero where the clamp is active."""
    raw = np.asarray(raw, dtype=np.float64)
    sp = softplus(raw)
    inside = (sp > PCOC_MIN) & (sp < PCOC_MAX)
    return np.where(inside, sigmoid(raw), 0.0)


def vrmp_loss(pcoc_hat: np.ndarray, pcoc: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean MAE on the bias ratio; returns (loss, d loss/d pcoc_hat)."""
    pcoc_hat = np.atleast_1d(np.asarray(pcoc_hat, dtype=np.float64))
    pcoc = np.atleast_1d(np.asarray(pcoc, dtype=np.float64))
    diff = pcoc_hat - pcoc
    loss = float(np.mean(np.abs(diff)))
    return loss, np.sign(diff) / diff.size


def infer_yg(z: np.ndarray | float, pcoc_hat: np.ndarray | float) -> np.ndarray:
    """Predicted conversions z / pcoc_hat; bounded in [z/10, 10z] by the clamp."""
    z = np.asarray(z, dtype=np.float64)
    pcoc_hat = np.asarray(pcoc_hat, dtype=np.float64)
    if np.any(pcoc_hat < PCOC_MIN) or np.any(pcoc_hat > PCOC_MAX):
        raise ValueError(f"pcoc_hat outside [{PCOC_MIN}, {PCOC_MAX}]")
    return z / pcoc_hat
