"""CF-NADE forward computations: hidden layers, per-rating scores, prediction.

Parameter layout (``K`` ratings, ``M`` targets, ``H`` hidden units, rank ``J``)::

    full      W (K, H, M)   V (K, M, H)
    factored  B (H, J)  A (K, J, M)   P (K, M, J)  Q (J, H)
    always    b (K, M)   c (H,)
    L >= 2    W_deep (L-1, H, H)   c_deep (L-1, H)

``W[k]`` holds the rating-(k+1) connection matrix; ratings are 1-based
everywhere in the public API and 0-based only as array offsets.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numeric import DTYPE, SeededRng, glorot_uniform, softmax

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    M: int
    K: int
    H: int
    L: int = 1
    J: int | None = None
    share_ratings: bool = False
    activation: str = "tanh"

    def __post_init__(self):
        if self.M < 1 or self.K < 1 or self.H < 1:
            raise ValueError(f"M, K, H must be positive (got {self.M}, {self.K}, {self.H})")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.J is not None:
            if self.J < 1:
                raise ValueError("factor rank J must be >= 1")
            if self.J >= self.H or self.J >= self.M:
                log.warning("factor rank J=%d is not much smaller than H=%d / M=%d", self.J, self.H, self.M)
        if self.activation != "tanh":
            raise ValueError("only tanh activation is supported")

    @property
    def factored(self) -> bool:
        return self.J is not None


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    K, M, H, J = config.K, config.M, config.H, config.J
    if config.factored:
        shapes = {"B": (H, J), "A": (K, J, M), "P": (K, M, J), "Q": (J, H)}
    else:
        shapes = {"W": (K, H, M), "V": (K, M, H)}
    shapes["b"] = (K, M)
    shapes["c"] = (H,)
    if config.L > 1:
        shapes["W_deep"] = (config.L - 1, H, H)
        shapes["c_deep"] = (config.L - 1, H)
    return shapes


WEIGHT_NAMES = frozenset({"W", "V", "B", "A", "P", "Q", "W_deep"})
FIRST_LAYER_NAMES = frozenset({"W", "A", "B", "c"})


def parameter_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


class ParameterSet(dict):
    """Name -> float64 array mapping, in checkpoint order."""

    def copy(self) -> "ParameterSet":
        return ParameterSet((k, v.copy()) for k, v in self.items())

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet((k, np.zeros_like(v)) for k, v in self.items())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values()])


def zero_params(config: ModelConfig) -> ParameterSet:
    return ParameterSet((n, np.zeros(s, dtype=DTYPE)) for n, s in param_shapes(config).items())


def init_params(config: ModelConfig, rng: SeededRng) -> ParameterSet:
    """Glorot-uniform weights (one bound per matrix), zero biases."""
    params = zero_params(config)
    K, M, H, J = config.K, config.M, config.H, config.J
    if config.factored:
        params["B"] = glorot_uniform(rng, (H, J), J, H)
        params["Q"] = glorot_uniform(rng, (J, H), H, J)
        for k in range(K):
            params["A"][k] = glorot_uniform(rng, (J, M), M, J)
            params["P"][k] = glorot_uniform(rng, (M, J), J, M)
    else:
        for k in range(K):
            params["W"][k] = glorot_uniform(rng, (H, M), M, H)
            params["V"][k] = glorot_uniform(rng, (M, H), H, M)
    for l in range(config.L - 1):
        params["W_deep"][l] = glorot_uniform(rng, (H, H), H, H)
    return params


def rating_mask(ratings, K: int, shared: bool) -> np.ndarray:
    """(K, n) 0/1 matrix selecting which per-rating weights each rating uses.

    Without sharing, rating r uses only slot r-1; with sharing it uses all
    slots 0..r-1.
    """
    r = np.asarray(ratings, dtype=np.int64)
    if r.size and (r.min() < 1 or r.max() > K):
        raise ValueError(f"ratings must lie in 1..{K}")
    slots = np.arange(K)[:, None]
    mask = slots < r[None, :] if shared else slots == (r[None, :] - 1)
    return mask.astype(DTYPE)


def _check_items(config: ModelConfig, items) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64)
    if items.size and (items.min() < 0 or items.max() >= config.M):
        raise IndexError(f"item index out of range 0..{config.M - 1}")
    return items


def effective_w_column(params: ParameterSet, config: ModelConfig, item: int, rating: int) -> np.ndarray:
    """Input-to-hidden contribution of one (item, rating) observation."""
    _check_items(config, [item])
    mask = rating_mask([rating], config.K, config.share_ratings)[:, 0]
    if config.factored:
        return params["B"] @ np.einsum("k,kj->j", mask, params["A"][:, :, item])
    return np.einsum("k,kh->h", mask, params["W"][:, :, item])


def sort_prefix(items, ratings) -> tuple[np.ndarray, np.ndarray]:
    items = np.asarray(items, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.int64)
    order = np.argsort(items, kind="stable")
    items, ratings = items[order], ratings[order]
    if items.size > 1 and np.any(items[1:] == items[:-1]):
        raise ValueError("duplicate item in prefix")
    return items, ratings


def first_layer(params: ParameterSet, config: ModelConfig, items, ratings):
    """Pre-activation of the first hidden layer for a prefix.

    Returns ``(a, u)`` where ``u`` is the rank-J input code (factored models)
    or None. The prefix is summed in ascending item order.
    """
    items, ratings = sort_prefix(items, ratings)
    _check_items(config, items)
    mask = rating_mask(ratings, config.K, config.share_ratings)
    if config.factored:
        u = np.einsum("kn,kjn->j", mask, params["A"][:, :, items])
        return params["c"] + params["B"] @ u, u
    return params["c"] + np.einsum("kn,khn->h", mask, params["W"][:, :, items]), None


def hidden_layers(params: ParameterSet, config: ModelConfig, a1: np.ndarray) -> list[np.ndarray]:
    hs = [np.tanh(a1)]
    for l in range(config.L - 1):
        hs.append(np.tanh(params["c_deep"][l] + params["W_deep"][l] @ hs[-1]))
    return hs


def hidden_from_prefix(params: ParameterSet, config: ModelConfig, prefix) -> list[np.ndarray]:
    """Hidden vectors ``[h1, ..., hL]`` given a list of (item, rating) pairs."""
    prefix = list(prefix)
    items = [m for m, _ in prefix]
    ratings = [r for _, r in prefix]
    a1, _ = first_layer(params, config, items, ratings)
    return hidden_layers(params, config, a1)


def score_terms(params: ParameterSet, config: ModelConfig, h_top: np.ndarray, items):
    """Per-rating terms ``b^k_m + V^k_m . h`` for each item, shape (n, K).

    Also returns ``z = Q h`` for factored models (None otherwise).
    """
    items = _check_items(config, items)
    if config.factored:
        z = params["Q"] @ h_top
        terms = params["b"][:, items] + np.einsum("knj,j->kn", params["P"][:, items, :], z)
        return terms.T, z
    terms = params["b"][:, items] + np.einsum("knh,h->kn", params["V"][:, items, :], h_top)
    return terms.T, None


def scores_from_terms(config: ModelConfig, terms: np.ndarray) -> np.ndarray:
    return np.cumsum(terms, axis=-1) if config.share_ratings else terms


def scores_for_items(params: ParameterSet, config: ModelConfig, h_top: np.ndarray, items) -> np.ndarray:
    terms, _ = score_terms(params, config, h_top, items)
    return scores_from_terms(config, terms)


def scores_for_item(params: ParameterSet, config: ModelConfig, h_top: np.ndarray, item: int) -> np.ndarray:
    return scores_for_items(params, config, h_top, [item])[0]


def softmax_conditional(scores) -> np.ndarray:
    return softmax(scores)


def expected_rating(probs: np.ndarray) -> np.ndarray:
    """Expectation of k under each row's distribution, clamped to [1, K]."""
    K = probs.shape[-1]
    return np.clip(probs @ np.arange(1, K + 1, dtype=DTYPE), 1.0, float(K))


def predict_many(params: ParameterSet, config: ModelConfig, hist_items, hist_ratings, targets) -> np.ndarray:
    """Predicted ratings for several targets sharing one history.

    The hidden state is built from the whole history; callers must exclude
    the targets from it.
    """
    a1, _ = first_layer(params, config, hist_items, hist_ratings)
    h_top = hidden_layers(params, config, a1)[-1]
    return expected_rating(softmax(scores_for_items(params, config, h_top, targets)))


def predict_rating(params: ParameterSet, config: ModelConfig, history, target_item: int) -> float:
    """Expected rating of ``target_item`` given (item, rating) history."""
    history = list(history)
    if any(m == target_item for m, _ in history):
        log.warning("target item %d found in history; dropping it", target_item)
        history = [(m, r) for m, r in history if m != target_item]
    items = [m for m, _ in history]
    ratings = [r for _, r in history]
    return float(predict_many(params, config, items, ratings, [target_item])[0])


# --- checkpoints ------------------------------------------------------------
# Layout (little-endian):
#   magic "CFND" | u32 version
#   i64 x 6: M, K, H, L, J (0 = full), share_ratings (0/1)
#   parameter arrays as f64, C order, in param_shapes() order
#   u64 checksum: first 8 bytes of BLAKE2b over every preceding byte

CKPT_MAGIC = b"CFND"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sI6q")


class CheckpointError(ValueError):
    pass


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def checkpoint_bytes(params: ParameterSet, config: ModelConfig) -> bytes:
    head = _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, config.M, config.K, config.H, config.L,
                           config.J or 0, int(config.share_ratings))
    chunks = [head]
    for name, shape in param_shapes(config).items():
        arr = np.asarray(params[name], dtype="<f8")
        if arr.shape != shape:
            raise CheckpointError(f"parameter {name} has shape {arr.shape}, expected {shape}")
        chunks.append(np.ascontiguousarray(arr).tobytes())
    payload = b"".join(chunks)
    return payload + _checksum(payload)


def save_checkpoint(path, params: ParameterSet, config: ModelConfig) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, config))


def load_checkpoint(path) -> tuple[ParameterSet, ModelConfig]:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size + 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    payload, digest = raw[:-8], raw[-8:]
    if _checksum(payload) != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    magic, version, M, K, H, L, J, share = _CKPT_HEAD.unpack_from(payload)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config = ModelConfig(M=M, K=K, H=H, L=L, J=J or None, share_ratings=bool(share))
    params = ParameterSet()
    offset = _CKPT_HEAD.size
    for name, shape in param_shapes(config).items():
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset)
        params[name] = arr.reshape(shape).astype(DTYPE)
        offset += 8 * n
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")
    return params, config
