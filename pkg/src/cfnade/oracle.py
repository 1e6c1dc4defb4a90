"""Brute-force reference computations for tiny models.

Nothing here calls into the model or loss modules: the forward pass, the
softmax and the ordinal product are re-derived with scalar ``math`` loops so
that a bug in the vectorized code cannot hide in both places.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence


@dataclass
class TinyInstance:
    """Parameters (name -> nested array), architecture flags and one entity.

    ``items``/``ratings`` list the entity's D observations in their fixed
    ordering; ratings are 1-based.
    """

    params: Mapping
    K: int
    H: int
    L: int
    J: int | None
    shared: bool
    items: Sequence[int]
    ratings: Sequence[int]

    @property
    def D(self) -> int:
        return len(self.items)


def _get(arr, *idx):
    for i in idx:
        arr = arr[i]
    return float(arr)


def _input_column(inst: TinyInstance, item: int, rating: int) -> list[float]:
    p = inst.params
    ks = range(rating) if inst.shared else [rating - 1]
    if inst.J is None:
        return [sum(_get(p["W"], k, h, item) for k in ks) for h in range(inst.H)]
    code = [sum(_get(p["A"], k, j, item) for k in ks) for j in range(inst.J)]
    return [sum(_get(p["B"], h, j) * code[j] for j in range(inst.J)) for h in range(inst.H)]


def hidden(inst: TinyInstance, prefix: Sequence[tuple[int, int]]) -> list[float]:
    p = inst.params
    acc = [_get(p["c"], h) for h in range(inst.H)]
    for item, rating in prefix:
        col = _input_column(inst, item, rating)
        acc = [a + w for a, w in zip(acc, col)]
    h = [math.tanh(a) for a in acc]
    for l in range(inst.L - 1):
        h = [math.tanh(_get(p["c_deep"], l, r) + sum(_get(p["W_deep"], l, r, q) * h[q] for q in range(inst.H)))
             for r in range(inst.H)]
    return h


def scores(inst: TinyInstance, h: Sequence[float], item: int) -> list[float]:
    p = inst.params
    per_rating = []
    for k in range(inst.K):
        if inst.J is None:
            v_row = [_get(p["V"], k, item, q) for q in range(inst.H)]
        else:
            v_row = [sum(_get(p["P"], k, item, j) * _get(p["Q"], j, q) for j in range(inst.J))
                     for q in range(inst.H)]
        per_rating.append(_get(p["b"], k, item) + sum(v * x for v, x in zip(v_row, h)))
    if not inst.shared:
        return per_rating
    return [sum(per_rating[: k + 1]) for k in range(inst.K)]


def softmax_probs(s: Sequence[float]) -> list[float]:
    top = max(s)
    e = [math.exp(x - top) for x in s]
    z = sum(e)
    return [x / z for x in e]


def ordinal_direct_product(s: Sequence[float], k: int) -> float:
    """Two-ranking ordinal likelihood evaluated as a plain product of ratios."""
    K = len(s)
    if not 1 <= k <= K:
        raise ValueError(f"rating {k} outside 1..{K}")
    e = [math.exp(x) for x in s]
    prob = 1.0
    for j in range(k, 0, -1):
        prob *= e[j - 1] / sum(e[:j])
    for j in range(k, K + 1):
        prob *= e[j - 1] / sum(e[j - 1:])
    return prob


def item_cost(s: Sequence[float], rating: int, lam: float) -> float:
    reg = -math.log(softmax_probs(s)[rating - 1])
    if lam == 0.0:
        return reg
    top = max(s)
    ordv = -math.log(ordinal_direct_product([x - top for x in s], rating))
    return (1.0 - lam) * reg + lam * ordv


def enumerate_joint_probability(inst: TinyInstance) -> float:
    """Sum of chain-rule probabilities over all K**D rating vectors."""
    total = 0.0
    for assignment in itertools.product(range(1, inst.K + 1), repeat=inst.D):
        prob = 1.0
        prefix: list[tuple[int, int]] = []
        for item, r in zip(inst.items, assignment):
            prob *= softmax_probs(scores(inst, hidden(inst, prefix), item))[r - 1]
            prefix.append((item, r))
        total += prob
    return total


def enumerate_split_expectation(inst: TinyInstance, lam: float = 0.0,
                                split_cost_fn: Callable[[Sequence[int], int], float] | None = None):
    """Average split-scaled cost vs. average full-sequence cost.

    ``lhs`` averages the D/(D-i+1)-scaled suffix cost over all D! orderings
    and D split positions; ``rhs`` averages the chain-rule cost over the D!
    orderings. ``split_cost_fn(ordering, i)`` replaces the built-in lhs
    evaluation when given (ordering holds 0-based positions into ``items``).
    """
    D = inst.D
    obs = list(zip(inst.items, inst.ratings))
    lhs_total, rhs_total, n_orders = 0.0, 0.0, 0
    for perm in itertools.permutations(range(D)):
        n_orders += 1
        seq = [obs[p] for p in perm]
        for i in range(1, D + 1):
            if split_cost_fn is not None:
                lhs_total += split_cost_fn(perm, i)
            else:
                h = hidden(inst, seq[: i - 1])
                suffix = sum(item_cost(scores(inst, h, m), r, lam) for m, r in seq[i - 1:])
                lhs_total += D / (D - i + 1) * suffix
        for i in range(D):
            h = hidden(inst, seq[:i])
            m, r = seq[i]
            rhs_total += item_cost(scores(inst, h, m), r, lam)
    return lhs_total / (n_orders * D), rhs_total / n_orders
