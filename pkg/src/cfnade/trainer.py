"""Split-point training: sampling, backpropagation, Adam and the epoch loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as mdl
from .data import RatingDataset
from .loss import CostConfig, split_cost
from .model import ModelConfig, ParameterSet
from .numeric import SeededRng

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced non-finite values or a runaway validation error."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    # Also scales the first-layer bias c.
    first_layer_lr_multiplier: float = 1.0
    weight_decay: float = 0.015
    batch_size: int = 512
    max_epochs: int = 100
    patience: int = 10
    seed: int = 1234
    cost: CostConfig = field(default_factory=CostConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


@dataclass
class TrainStep:
    """One sampled (ordering, split) instance for a single entity.

    ``split`` is the 1-based position i; the prefix holds ordering positions
    < i and the suffix positions >= i.
    """

    items: np.ndarray
    ratings: np.ndarray
    ordering: np.ndarray
    split: int

    @property
    def D(self) -> int:
        return len(self.items)

    @property
    def prefix(self) -> tuple[np.ndarray, np.ndarray]:
        pos = self.ordering[: self.split - 1]
        return self.items[pos], self.ratings[pos]

    @property
    def suffix(self) -> tuple[np.ndarray, np.ndarray]:
        pos = self.ordering[self.split - 1:]
        return self.items[pos], self.ratings[pos]


def sample_training_step(rng: SeededRng, items, ratings) -> TrainStep:
    items = np.asarray(items, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.int64)
    D = len(items)
    if D < 1:
        raise ValueError("cannot sample a training step from zero ratings")
    ordering = rng.permutation(D)
    split = int(rng.integers(1, D + 1))
    return TrainStep(items, ratings, ordering, split)


def _check_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite values in {name}")


def backprop_step(params: ParameterSet, config: ModelConfig, step: TrainStep,
                  cost_config: CostConfig, grads: ParameterSet | None = None):
    """Cost of one split and its exact gradient with respect to all parameters.

    When ``grads`` is given the gradient is accumulated into it (and it is
    returned); otherwise a fresh zero-initialized set is used.
    """
    if grads is None:
        grads = params.zeros_like()
    K, shared = config.K, config.share_ratings
    p_items, p_ratings = mdl.sort_prefix(*step.prefix)
    s_items, s_ratings = step.suffix

    a1, u = mdl.first_layer(params, config, p_items, p_ratings)
    hs = mdl.hidden_layers(params, config, a1)
    h_top = hs[-1]
    terms, z = mdl.score_terms(params, config, h_top, s_items)
    scores = mdl.scores_from_terms(config, terms)
    _check_finite("scores", scores)

    cost, d_scores = split_cost(step.D, step.split, scores, s_ratings, cost_config)

    # Cumulative scores: a per-rating term t feeds every score k >= t.
    d_terms = np.cumsum(d_scores[:, ::-1], axis=1)[:, ::-1] if shared else d_scores
    dT = d_terms.T  # (K, n)
    grads["b"][:, s_items] += dT
    if config.factored:
        grads["P"][:, s_items, :] += dT[:, :, None] * z[None, None, :]
        dz = np.einsum("kn,knj->j", dT, params["P"][:, s_items, :])
        grads["Q"] += np.outer(dz, h_top)
        dh = params["Q"].T @ dz
    else:
        grads["V"][:, s_items, :] += dT[:, :, None] * h_top[None, None, :]
        dh = np.einsum("kn,knh->h", dT, params["V"][:, s_items, :])

    for l in range(config.L - 1, 0, -1):
        da = dh * (1.0 - hs[l] ** 2)
        grads["W_deep"][l - 1] += np.outer(da, hs[l - 1])
        grads["c_deep"][l - 1] += da
        dh = params["W_deep"][l - 1].T @ da
    da1 = dh * (1.0 - hs[0] ** 2)
    grads["c"] += da1

    if len(p_items):
        mask = mdl.rating_mask(p_ratings, K, shared)  # (K, n_prefix)
        if config.factored:
            du = params["B"].T @ da1
            grads["B"] += np.outer(da1, u)
            grads["A"][:, :, p_items] += mask[:, None, :] * du[None, :, None]
        else:
            grads["W"][:, :, p_items] += mask[:, None, :] * da1[None, :, None]
    return cost, grads


def batch_gradient(params: ParameterSet, config: ModelConfig, steps, cost_config: CostConfig):
    """Mean cost and mean gradient over a list of steps, summed in list order."""
    grads = params.zeros_like()
    total = 0.0
    for st in steps:
        c, _ = backprop_step(params, config, st, cost_config, grads)
        total += c
    n = len(steps)
    for g in grads.values():
        g /= n
    return total / n, grads


@dataclass
class AdamState:
    m: ParameterSet
    v: ParameterSet
    t: int = 0

    @classmethod
    def zeros(cls, params: ParameterSet) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_update(params: ParameterSet, grads: ParameterSet, state: AdamState, cfg: TrainConfig) -> None:
    """One in-place bias-corrected Adam step.

    L2 decay is folded into the gradient of weight matrices only; the
    first-layer parameters use ``learning_rate * first_layer_lr_multiplier``.
    """
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if cfg.weight_decay and name in mdl.WEIGHT_NAMES:
            g = g + cfg.weight_decay * p
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = cfg.learning_rate
        if name in mdl.FIRST_LAYER_NAMES:
            lr *= cfg.first_layer_lr_multiplier
        p -= lr * (m / corr1) / (np.sqrt(v / corr2) + cfg.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_cost: float
    valid_rmse: float
    seconds: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_cost:.10g}\t{self.valid_rmse:.10g}\t{self.seconds:.3f}"


@dataclass
class TrainResult:
    params: ParameterSet
    config: ModelConfig
    best_epoch: int
    best_valid_rmse: float
    history: list[EpochRecord]


def train(train_set: RatingDataset, valid_set: RatingDataset | None, config: ModelConfig,
          cfg: TrainConfig, log_path=None, checkpoint_path=None, params: ParameterSet | None = None,
          on_epoch=None) -> TrainResult:
    """Run the epoch loop with early stopping on validation RMSE.

    Each epoch shuffles the entities, draws one (ordering, split) per entity
    and updates once per mini-batch of ``batch_size`` entities. Without a
    validation set the last epoch is kept.
    """
    from .evaluate import evaluate_model

    if len(train_set) == 0:
        raise ValueError("training split is empty")
    rng = SeededRng(cfg.seed)
    if params is None:
        params = mdl.init_params(config, rng.spawn(0))
    state = AdamState.zeros(params)
    per_entity = train_set.by_entity()
    active = np.array([e for e, (t, _) in enumerate(per_entity) if len(t)], dtype=np.int64)

    best = params.copy()
    best_rmse, best_epoch = np.inf, 0
    stale, runaway = 0, 0
    history: list[EpochRecord] = []
    log_fh = Path(log_path).open("w") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            order = active[rng.permutation(len(active))]
            costs = []
            for start in range(0, len(order), cfg.batch_size):
                steps = [sample_training_step(rng, *per_entity[e]) for e in order[start:start + cfg.batch_size]]
                c, grads = batch_gradient(params, config, steps, cfg.cost)
                for name, g in grads.items():
                    _check_finite(f"gradient of {name}", g)
                adam_update(params, grads, state, cfg)
                costs.append(c * len(steps))
            train_cost = float(np.sum(costs) / len(order))
            if valid_set is not None and len(valid_set):
                v_rmse = evaluate_model(params, config, valid_set, train_set).rmse
            else:
                v_rmse = float("nan")
            rec = EpochRecord(epoch, train_cost, v_rmse, time.perf_counter() - t0)
            history.append(rec)
            log.info("epoch %d cost %.5f valid rmse %.5f", epoch, train_cost, v_rmse)
            if log_fh:
                log_fh.write(rec.line() + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(rec)
            if not np.isfinite(train_cost):
                raise DivergenceError(f"epoch {epoch}: training cost is {train_cost}")

            if np.isnan(v_rmse):
                best, best_epoch = params.copy(), epoch
                continue
            runaway = runaway + 1 if v_rmse > config.K else 0
            if runaway >= 3:
                raise DivergenceError(f"validation RMSE above K={config.K} for 3 consecutive epochs")
            if v_rmse < best_rmse:
                best, best_rmse, best_epoch, stale = params.copy(), v_rmse, epoch, 0
                if checkpoint_path:
                    mdl.save_checkpoint(checkpoint_path, best, config)
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop after epoch %d (best epoch %d)", epoch, best_epoch)
                    break
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path and (best_epoch == 0 or np.isinf(best_rmse)):
        mdl.save_checkpoint(checkpoint_path, best, config)
    return TrainResult(best, config, best_epoch, float(best_rmse), history)
