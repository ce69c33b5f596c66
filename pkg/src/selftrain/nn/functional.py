"""Stateless pieces: softmax, cross entropy, dropout masks, stochastic-depth gates."""
from typing import NamedTuple

import numpy as np

from ..errors import InvalidDistributionError

PROB_FLOOR = 1e-12


def softmax(logits):
    """Row-wise softmax of a 2-D (or 1-D) array, max-subtracted for stability."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_rows(name, rows, tol):
    sums = rows.sum(axis=-1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
    if bad.size:
        i = int(bad[0])
        raise InvalidDistributionError(f"{name} row {i} sums to {sums.flat[i]!r}, not 1")
    if np.any(rows < 0):
        raise InvalidDistributionError(f"{name} has negative entries")


def cross_entropy(probs, target, tol=1e-6):
    """Mean over rows of ``-sum_k target_k * log(probs_k)``.

    ``target`` may be soft or one-hot. Probabilities are floored at 1e-12
    inside the log, so a confident wrong prediction costs about 27.6 nats
    rather than infinity.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    t = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if p.shape != t.shape:
        raise ValueError(f"probs shape {p.shape} != target shape {t.shape}")
    _check_rows("target", t, tol)
    _check_rows("probs", p, tol)
    return float(np.mean(-(t * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=1)))


def softmax_cross_entropy(logits, target, weight=None):
    """Loss sum and logit gradient of softmax + cross entropy.

    Returns ``(per_row_loss, grad)`` where ``grad[i] = (softmax(logits)[i] -
    target[i]) * weight`` (weight defaults to 1/N, i.e. the gradient of the
    row mean). Targets must be distributions.
    """
    logits = np.asarray(logits, dtype=np.float64)
    probs = softmax(logits)
    t = np.asarray(target, dtype=np.float64)
    per_row = -(t * np.log(np.maximum(probs, PROB_FLOOR))).sum(axis=1)
    if weight is None:
        weight = 1.0 / logits.shape[0]
    return per_row, (probs - t) * weight


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def dropout_mask(shape, rate, rng, mode="train"):
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def survival_probability(block_index, total_blocks, final_survival):
    """Linear-decay survival ``1 - (l/L)(1 - p_L)`` for residual block ``l``."""
    if not 1 <= block_index <= total_blocks:
        raise ValueError(f"block index {block_index} outside 1..{total_blocks}")
    return 1.0 - (block_index / total_blocks) * (1.0 - final_survival)


class Gate(NamedTuple):
    kept: np.ndarray
    scale: float
    survival: float


def stochastic_depth_gate(block_index, total_blocks, final_survival, rng, mode, size=None):
    """Gate for one residual branch.

    Train mode draws ``kept ~ Bernoulli(p_l)`` (one draw per example when
    ``size`` is given) and the kept branch passes unscaled. Infer mode keeps
    every branch and scales it by ``p_l``.
    """
    p = survival_probability(block_index, total_blocks, final_survival)
    if mode == "infer":
        return Gate(np.ones(size if size is not None else (), dtype=bool), p, p)
    kept = rng.random(size) < p
    return Gate(np.asarray(kept), 1.0, p)
