"""Test-set prediction, RMSE and the per-item-mean baseline."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .data import RatingDataset, default_prediction
from .model import ModelConfig, ParameterSet, predict_many


class DimensionMismatch(ValueError):
    pass


def rmse(true_ratings, predicted) -> float:
    t = np.asarray(true_ratings, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise ValueError("rmse of an empty set")
    return float(np.sqrt(np.mean((t - p) ** 2)))


@dataclass
class EvalReport:
    rmse: float
    count: int
    cold_count: int
    confusion: np.ndarray  # [true - 1, rounded prediction - 1]
    predictions: np.ndarray | None = None

    def to_text(self) -> str:
        K = self.confusion.shape[0]
        lines = [f"RMSE        {self.rmse:.6f}",
                 f"ratings     {self.count}",
                 f"cold        {self.cold_count}",
                 "confusion (rows true, cols rounded prediction):"]
        lines.append("      " + " ".join(f"{k:>7d}" for k in range(1, K + 1)))
        for k in range(K):
            lines.append(f"{k + 1:>5d} " + " ".join(f"{c:>7d}" for c in self.confusion[k]))
        return "\n".join(lines)

    def record(self, **extra) -> str:
        fields = {"rmse": f"{self.rmse:.6f}", "count": self.count, "cold_count": self.cold_count}
        fields.update(extra)
        return " ".join(f"{k}={v}" for k, v in fields.items())


def config_hash(obj) -> str:
    doc = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(doc).hexdigest()[:12]


def round_half_up(pred: np.ndarray, K: int) -> np.ndarray:
    return np.clip(np.floor(pred + 0.5), 1, K).astype(np.int64)


def _report(true: np.ndarray, pred: np.ndarray, cold: int, K: int) -> EvalReport:
    conf = np.zeros((K, K), dtype=np.int64)
    np.add.at(conf, (true - 1, round_half_up(pred, K) - 1), 1)
    return EvalReport(rmse(true, pred), len(true), cold, conf, pred)


def evaluate_model(params: ParameterSet, config: ModelConfig, test: RatingDataset,
                   train: RatingDataset) -> EvalReport:
    """Predict each test rating from the entity's training ratings only.

    Targets without any training rating get the scale midpoint.
    """
    if config.M != test.num_targets or config.K != test.K:
        raise DimensionMismatch(
            f"model expects M={config.M}, K={config.K}; data has M={test.num_targets}, K={test.K}")
    if (train.num_entities, train.num_targets) != (test.num_entities, test.num_targets):
        raise DimensionMismatch(
            f"train shape ({train.num_entities}, {train.num_targets}) differs from "
            f"test shape ({test.num_entities}, {test.num_targets})")
    pred = np.empty(len(test), dtype=np.float64)
    seen = train.target_counts() > 0
    cold_mask = ~seen[test.targets]
    pred[cold_mask] = default_prediction(config.K)
    history = train.by_entity()
    warm = np.flatnonzero(~cold_mask)
    order = warm[np.argsort(test.entities[warm], kind="stable")]
    ents = test.entities[order]
    bounds = np.flatnonzero(np.diff(ents)) + 1
    for group in np.split(order, bounds):
        if not len(group):
            continue
        h_items, h_ratings = history[test.entities[group[0]]]
        pred[group] = predict_many(params, config, h_items, h_ratings, test.targets[group])
    return _report(test.ratings, pred, int(cold_mask.sum()), config.K)


def item_mean_baseline(train: RatingDataset, test: RatingDataset) -> float:
    """RMSE of predicting each test rating by its item's training mean.

    Items never rated in training fall back to the global training mean.
    """
    if len(train) == 0:
        raise ValueError("baseline needs a nonempty training split")
    _, tr_items = train.user_item_arrays()
    _, te_items = test.user_item_arrays()
    n_items = max(tr_items.max(initial=0), te_items.max(initial=0)) + 1
    sums = np.bincount(tr_items, weights=train.ratings, minlength=n_items)
    counts = np.bincount(tr_items, minlength=n_items)
    global_mean = train.ratings.mean()
    means = np.where(counts > 0, sums / np.maximum(counts, 1), global_mean)
    return rmse(test.ratings, means[te_items])
