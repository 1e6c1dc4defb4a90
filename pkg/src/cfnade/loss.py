"""Rating-level training costs and their gradients with respect to scores.

Every function accepts either one score vector of length K or a batch of
shape (n, K); true ratings are 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import DTYPE, log_softmax


@dataclass(frozen=True)
class CostConfig:
    """``lam`` weights the ordinal cost: 0 is pure NLL, 1 pure ordinal."""

    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")

    @property
    def variant(self) -> str:
        if self.lam == 0.0:
            return "regular"
        if self.lam == 1.0:
            return "ordinal"
        return "hybrid"


def _batch(scores, true_rating):
    s = np.asarray(scores, dtype=DTYPE)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    k = np.atleast_1d(np.asarray(true_rating, dtype=np.int64))
    K = s.shape[1]
    if k.shape[0] != s.shape[0]:
        raise ValueError("one true rating per score vector is required")
    if k.min() < 1 or k.max() > K:
        raise ValueError(f"true rating must lie in 1..{K}")
    return s, k, single


def _unbatch(cost, grad, single):
    if single:
        return float(cost[0]), grad[0]
    return cost, grad


def regular_nll(scores, true_rating):
    """Softmax negative log-likelihood; gradient is softmax minus one-hot."""
    s, k, single = _batch(scores, true_rating)
    logp = log_softmax(s)
    rows = np.arange(len(k))
    cost = -logp[rows, k - 1]
    grad = np.exp(logp)
    grad[rows, k - 1] -= 1.0
    return _unbatch(cost, grad, single)


def _slice_log_softmax(s: np.ndarray, upward: bool) -> np.ndarray:
    """(n, K, K) array whose [n, j, t] entry is log softmax over the slice.

    Downward slices are ``t <= j``; upward slices are ``t >= j``. Entries
    outside the slice are -inf.
    """
    K = s.shape[1]
    j = np.arange(K)[:, None]
    t = np.arange(K)[None, :]
    inside = (t >= j) if upward else (t <= j)
    masked = np.where(inside[None, :, :], s[:, None, :], -np.inf)
    m = np.max(masked, axis=2, keepdims=True)
    shifted = masked - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=2, keepdims=True))


def ordinal_log_conditional(scores, true_rating):
    """Log of the two-ranking likelihood of rating k and its score gradient.

    The downward factor runs j = k..1 with a softmax over ratings 1..j, the
    upward factor runs j = k..K with a softmax over ratings j..K. The j = k
    term appears in both.
    """
    s, k, single = _batch(scores, true_rating)
    K = s.shape[1]
    j = np.arange(K)[None, :]
    down = (j <= (k[:, None] - 1)).astype(DTYPE)
    up = (j >= (k[:, None] - 1)).astype(DTYPE)
    ls_down = _slice_log_softmax(s, upward=False)
    ls_up = _slice_log_softmax(s, upward=True)
    diag = np.arange(K)
    logp = np.sum(down * ls_down[:, diag, diag], axis=1) + np.sum(up * ls_up[:, diag, diag], axis=1)
    # d/ds_t sum_j w_j log softmax_slice_j(j) = w_t - sum_j w_j softmax_slice_j(t)
    grad = down + up
    grad -= np.einsum("nj,njt->nt", down, np.exp(ls_down))
    grad -= np.einsum("nj,njt->nt", up, np.exp(ls_up))
    return _unbatch(logp, grad, single)


def ordinal_cost(scores, true_rating):
    logp, grad = ordinal_log_conditional(scores, true_rating)
    return -logp, -grad


def hybrid_cost(scores, true_rating, cost_config: CostConfig):
    lam = cost_config.lam
    if lam == 0.0:
        return regular_nll(scores, true_rating)
    if lam == 1.0:
        return ordinal_cost(scores, true_rating)
    c_reg, g_reg = regular_nll(scores, true_rating)
    c_ord, g_ord = ordinal_cost(scores, true_rating)
    return (1.0 - lam) * c_reg + lam * c_ord, (1.0 - lam) * g_reg + lam * g_ord


def split_scale(D: int, i: int) -> float:
    """Weight D / (D - i + 1) for a split at 1-based position ``i``."""
    if not 1 <= i <= D:
        raise ValueError(f"split position {i} outside 1..{D}")
    return D / (D - i + 1)


def split_cost(D: int, i: int, suffix_scores, suffix_ratings, cost_config: CostConfig):
    """Scaled suffix cost for one sampled split.

    ``suffix_scores`` has one row per suffix item (D - i + 1 rows), all
    computed from the same prefix. Returns the scalar cost and the (n, K)
    score gradients, both multiplied by D / (D - i + 1).
    """
    s = np.atleast_2d(np.asarray(suffix_scores, dtype=DTYPE))
    if s.shape[0] != D - i + 1:
        raise ValueError(f"expected {D - i + 1} suffix items, got {s.shape[0]}")
    scale = split_scale(D, i)
    costs, grads = hybrid_cost(s, suffix_ratings, cost_config)
    return scale * float(np.sum(costs)), scale * grads
