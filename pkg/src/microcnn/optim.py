"""Categorical cross-entropy and the Adam optimiser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, ShapeError

PROB_FLOOR = 1e-7


@dataclass
class LossValue:
    mean_loss: float
    per_sample: np.ndarray | None = None


def _check_onehot(probs, onehot):
    if probs.shape != onehot.shape or probs.ndim != 2:
        raise ShapeError(f"probabilities {probs.shape} and labels {onehot.shape} disagree")
    ok = np.isin(onehot, (0, 1)).all() and np.all(onehot.sum(axis=1) == 1)
    if not ok:
        raise ValueError("labels are not valid one-hot rows")


def cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> LossValue:
    """Mean of ``-ln(p_true)`` with ``p_true`` clamped to ``[1e-7, 1]``."""
    _check_onehot(probs, onehot)
    p_true = (probs.astype(np.float64) * onehot).sum(axis=1)
    per_sample = -np.log(np.clip(p_true, PROB_FLOOR, 1.0))
    return LossValue(float(per_sample.mean()), per_sample)


def softmax_xent_backward(probs: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the pre-softmax logits."""
    if probs.shape != onehot.shape:
        raise ShapeError(f"probabilities {probs.shape} and labels {onehot.shape} disagree")
    return ((probs - onehot) / DTYPE(probs.shape[0])).astype(DTYPE, copy=False)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    @classmethod
    def like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """Apply one bias-corrected Adam update to ``param`` in place."""
    if not (param.shape == grad.shape == state.m.shape == state.v.shape):
        raise ShapeError(f"adam: param {param.shape}, grad {grad.shape}, "
                         f"moments {state.m.shape}/{state.v.shape} must match")
    state.t += 1
    # bias corrections use the float32 decay rates the recurrence actually applies
    b1, b2 = DTYPE(state.beta1), DTYPE(state.beta2)
    state.m *= b1
    state.m += (DTYPE(1) - b1) * grad
    state.v *= b2
    state.v += (DTYPE(1) - b2) * (grad * grad)
    m_hat = state.m / DTYPE(1.0 - float(b1) ** state.t)
    v_hat = state.v / DTYPE(1.0 - float(b2) ** state.t)
    param -= DTYPE(state.alpha) * m_hat / (np.sqrt(v_hat) + DTYPE(state.epsilon))
    return param
