"""Rating-file parsing, splitting, transposition and the binary split cache."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numeric import SeededRng

log = logging.getLogger(__name__)

USER_BASED = "user"
ITEM_BASED = "item"

CACHE_MAGIC = b"CFDS"
CACHE_VERSION = 1


class DataError(ValueError):
    """Malformed or inconsistent rating data."""


@dataclass(frozen=True)
class RatingTriple:
    user_id: int
    item_id: int
    rating: int
    timestamp: int = 0


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.10
    valid_fraction_of_train: float = 0.05
    seed: int = 1234

    def __post_init__(self):
        for name in ("test_fraction", "valid_fraction_of_train"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


@dataclass
class RatingDataset:
    """Sparse ratings indexed densely from 0.

    ``entities`` index the model instances (users for user-based, items for
    item-based); ``targets`` index the columns the model predicts. The id
    maps translate dense indices back to raw file ids.
    """

    entities: np.ndarray
    targets: np.ndarray
    ratings: np.ndarray
    num_entities: int
    num_targets: int
    K: int
    basis: str = USER_BASED
    entity_ids: np.ndarray = field(default=None)
    target_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.entities = np.asarray(self.entities, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=np.int64)
        if self.entity_ids is None:
            self.entity_ids = np.arange(self.num_entities, dtype=np.int64)
        if self.target_ids is None:
            self.target_ids = np.arange(self.num_targets, dtype=np.int64)
        self.entity_ids = np.asarray(self.entity_ids, dtype=np.int64)
        self.target_ids = np.asarray(self.target_ids, dtype=np.int64)
        if not (len(self.entities) == len(self.targets) == len(self.ratings)):
            raise DataError("entity, target and rating arrays differ in length")
        if self.basis not in (USER_BASED, ITEM_BASED):
            raise DataError(f"unknown basis {self.basis!r}")

    def __len__(self) -> int:
        return len(self.ratings)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RatingDataset):
            return NotImplemented
        return (
            self.basis == other.basis
            and self.num_entities == other.num_entities
            and self.num_targets == other.num_targets
            and self.K == other.K
            and _same_triples(self, other)
            and np.array_equal(self.entity_ids, other.entity_ids)
            and np.array_equal(self.target_ids, other.target_ids)
        )

    def with_triples(self, idx: np.ndarray) -> "RatingDataset":
        """Subset sharing this dataset's dimensions and id maps."""
        return RatingDataset(
            self.entities[idx], self.targets[idx], self.ratings[idx],
            self.num_entities, self.num_targets, self.K, self.basis,
            self.entity_ids, self.target_ids,
        )

    def by_entity(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-entity ``(targets, ratings)`` arrays sorted by target index.

        Entities with no ratings get empty arrays.
        """
        order = np.lexsort((self.targets, self.entities))
        ents = self.entities[order]
        bounds = np.searchsorted(ents, np.arange(self.num_entities + 1))
        t, r = self.targets[order], self.ratings[order]
        return [(t[bounds[e]:bounds[e + 1]], r[bounds[e]:bounds[e + 1]])
                for e in range(self.num_entities)]

    def target_counts(self) -> np.ndarray:
        return np.bincount(self.targets, minlength=self.num_targets)

    def user_item_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense (user, item) index arrays regardless of basis."""
        if self.basis == USER_BASED:
            return self.entities, self.targets
        return self.targets, self.entities


def _same_triples(a: RatingDataset, b: RatingDataset) -> bool:
    if len(a) != len(b):
        return False
    ka = np.lexsort((a.targets, a.entities))
    kb = np.lexsort((b.targets, b.entities))
    return (np.array_equal(a.entities[ka], b.entities[kb])
            and np.array_equal(a.targets[ka], b.targets[kb])
            and np.array_equal(a.ratings[ka], b.ratings[kb]))


def parse_movielens(path, separator: str = "::", rescale_half_stars: bool = False):
    """Read a ``user<sep>item<sep>rating<sep>timestamp`` file.

    Returns ``(triples, (N, M, K))`` where N and M count distinct users and
    items. With ``rescale_half_stars`` a 0.5..5.0 half-star rating r becomes
    the integer 2r on a 10-point scale; otherwise ratings must be integers
    and K is the largest observed rating.
    """
    path = Path(path)
    triples: list[RatingTriple] = []
    seen: dict[tuple[int, int], int] = {}
    duplicates = 0
    with path.open("r", encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(separator) if separator.strip() else line.split()
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                user, item = int(parts[0]), int(parts[1])
                raw = float(parts[2])
                ts = int(float(parts[3]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if user < 1 or item < 1:
                raise DataError(f"{path}:{lineno}: ids must be >= 1")
            rating = _scale_rating(raw, rescale_half_stars, f"{path}:{lineno}")
            key = (user, item)
            if key in seen:
                duplicates += 1
                triples[seen[key]] = RatingTriple(user, item, rating, ts)
                continue
            seen[key] = len(triples)
            triples.append(RatingTriple(user, item, rating, ts))
    if not triples:
        raise DataError(f"{path}: no ratings found")
    if duplicates:
        log.warning("%d duplicate (user, item) pairs; kept the last occurrence", duplicates)
    n_users = len({t.user_id for t in triples})
    n_items = len({t.item_id for t in triples})
    K = 10 if rescale_half_stars else max(t.rating for t in triples)
    if rescale_half_stars and all(t.rating % 2 == 0 for t in triples):
        log.warning("rescaling requested but all ratings are whole stars; only even ratings observed")
    return triples, (n_users, n_items, K)


def _scale_rating(raw: float, rescale: bool, where: str) -> int:
    if rescale:
        doubled = raw * 2.0
        if doubled != round(doubled) or not 1 <= doubled <= 10:
            raise DataError(f"{where}: rating {raw} is not on the 0.5..5.0 half-star scale")
        return int(round(doubled))
    if raw != int(raw) or raw < 1:
        raise DataError(f"{where}: rating {raw} is not an integer >= 1")
    return int(raw)


def dataset_from_triples(triples, K: int | None = None, basis: str = USER_BASED) -> RatingDataset:
    """Dense re-index of raw triples into a user-based dataset (optionally transposed)."""
    users = np.array([t.user_id for t in triples], dtype=np.int64)
    items = np.array([t.item_id for t in triples], dtype=np.int64)
    ratings = np.array([t.rating for t in triples], dtype=np.int64)
    if K is None:
        K = int(ratings.max())
    if ratings.min() < 1 or ratings.max() > K:
        raise DataError(f"ratings outside 1..{K}")
    user_ids, u_idx = np.unique(users, return_inverse=True)
    item_ids, i_idx = np.unique(items, return_inverse=True)
    ds = RatingDataset(u_idx, i_idx, ratings, len(user_ids), len(item_ids), K,
                       USER_BASED, user_ids, item_ids)
    return transpose(ds) if basis == ITEM_BASED else ds


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(dataset: RatingDataset, spec: SplitSpec = SplitSpec(), rng: SeededRng | None = None):
    """Random per-rating split into ``(train, valid, test)``.

    The test share is ``round(test_fraction * total)``; validation takes
    ``round(valid_fraction_of_train * remainder)`` of what is left. Rounding
    is half-up.
    """
    total = len(dataset)
    if total < 20:
        raise DataError(f"need at least 20 ratings to split, got {total}")
    rng = rng if rng is not None else SeededRng(spec.seed)
    order = rng.permutation(total)
    n_test = _round_half_up(spec.test_fraction * total)
    rest = total - n_test
    n_valid = _round_half_up(spec.valid_fraction_of_train * rest)
    test_idx = np.sort(order[:n_test])
    valid_idx = np.sort(order[n_test:n_test + n_valid])
    train_idx = np.sort(order[n_test + n_valid:])
    train = dataset.with_triples(train_idx)
    cold = np.setdiff1d(np.unique(dataset.targets[test_idx]), np.unique(train.targets))
    if len(cold):
        log.info("%d test targets have no training ratings; they get the default prediction", len(cold))
    return train, dataset.with_triples(valid_idx), dataset.with_triples(test_idx)


def transpose(dataset: RatingDataset) -> RatingDataset:
    """Swap the roles of entities and targets (user-based <-> item-based)."""
    basis = ITEM_BASED if dataset.basis == USER_BASED else USER_BASED
    return RatingDataset(
        dataset.targets.copy(), dataset.entities.copy(), dataset.ratings.copy(),
        dataset.num_targets, dataset.num_entities, dataset.K, basis,
        dataset.target_ids.copy(), dataset.entity_ids.copy(),
    )


def default_prediction(K: int) -> float:
    """Rating used for targets never seen in training: the scale midpoint."""
    if K < 1:
        raise ValueError("K must be >= 1")
    return (1 + K) / 2.0


# --- binary cache -----------------------------------------------------------
# Layout (all little-endian):
#   magic "CFDS" | u32 version | u32 basis (0 user, 1 item)
#   u32 num_entities | u32 num_targets | u32 K | u32 count
#   count x (i32 entity, i32 target, i32 rating)

_HEADER = struct.Struct("<4sIIIIII")


def save_cache(dataset: RatingDataset, path) -> None:
    trip = np.empty((len(dataset), 3), dtype="<i4")
    trip[:, 0] = dataset.entities
    trip[:, 1] = dataset.targets
    trip[:, 2] = dataset.ratings
    header = _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, 0 if dataset.basis == USER_BASED else 1,
                          dataset.num_entities, dataset.num_targets, dataset.K, len(dataset))
    Path(path).write_bytes(header + trip.tobytes())


def load_cache(path, entity_ids=None, target_ids=None) -> RatingDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated cache header")
    magic, version, basis, n_ent, n_tgt, K, count = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    body = np.frombuffer(raw, dtype="<i4", offset=_HEADER.size)
    if body.size != 3 * count:
        raise DataError(f"{path}: expected {count} triples, found {body.size / 3:g}")
    body = body.reshape(count, 3).astype(np.int64)
    return RatingDataset(body[:, 0], body[:, 1], body[:, 2], n_ent, n_tgt, K,
                         USER_BASED if basis == 0 else ITEM_BASED, entity_ids, target_ids)


def save_id_maps(dataset: RatingDataset, path) -> None:
    doc = {
        "basis": dataset.basis,
        "entity_ids": dataset.entity_ids.tolist(),
        "target_ids": dataset.target_ids.tolist(),
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_id_maps(path) -> tuple[np.ndarray, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    return np.array(doc["entity_ids"], dtype=np.int64), np.array(doc["target_ids"], dtype=np.int64)


SPLIT_NAMES = ("train", "valid", "test")


def load_prepared(directory) -> dict[str, RatingDataset]:
    """Load the three split caches written by ``cfnade prepare``."""
    directory = Path(directory)
    maps = directory / "id_maps.json"
    ent_ids, tgt_ids = load_id_maps(maps) if maps.exists() else (None, None)
    out = {}
    for name in SPLIT_NAMES:
        p = directory / f"{name}.cfds"
        if not p.exists():
            raise DataError(f"missing split cache {p}")
        out[name] = load_cache(p, ent_ids, tgt_ids)
    return out


def planted_dataset(n_users: int = 50, n_items: int = 20, K: int = 5, rank: int = 2,
                    noise: float = 0.3, density: float = 1.0, seed: int = 0) -> RatingDataset:
    """User-based ratings drawn from a planted low-rank model.

    A latent score ``item_bias + user_factors . item_factors + noise`` is
    standardized and rounded onto 1..K around the scale midpoint.
    """
    rng = SeededRng(seed)
    u = rng.normal(size=(n_users, rank))
    v = rng.normal(size=(n_items, rank))
    bias = rng.normal(scale=0.5, size=n_items)
    latent = bias[None, :] + u @ v.T / np.sqrt(rank)
    latent = latent + rng.normal(scale=noise, size=latent.shape)
    latent = (latent - latent.mean()) / latent.std()
    mid = (1 + K) / 2.0
    grid = np.clip(np.rint(mid + latent * (K - 1) / 4.0), 1, K).astype(np.int64)
    keep = rng.uniform(size=grid.shape) < density
    users, items = np.nonzero(keep)
    return RatingDataset(users, items, grid[users, items], n_users, n_items, K, USER_BASED)
