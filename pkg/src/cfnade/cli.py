"""``cfnade`` command line: prepare, train, eval, predict.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import data as cfdata
from .evaluate import DimensionMismatch, config_hash, evaluate_model, item_mean_baseline
from .loss import CostConfig
from .model import CheckpointError, ModelConfig, load_checkpoint, predict_rating
from .numeric import SeededRng
from .trainer import DivergenceError, TrainConfig, train

log = logging.getLogger("cfnade")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

CHECKPOINT_NAME = "checkpoint.cfnd"
LOG_NAME = "train_log.tsv"
CONFIG_NAME = "resolved_config.json"


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    """Flat, JSON-serializable description of one training run."""

    data: str = ""
    out: str = ""
    H: int = 500
    L: int = 1
    J: int | None = None
    share_ratings: bool = True
    lam: float = 1.0
    learning_rate: float = 0.001
    first_layer_lr_multiplier: float = 1.0
    weight_decay: float = 0.015
    batch_size: int = 512
    max_epochs: int = 100
    patience: int = 10
    seed: int = 1234

    # JSON key -> attribute, for names that are not Python identifiers.
    _ALIASES = {"lambda": "lam"}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in doc.items():
            attr = cls._ALIASES.get(key, key)
            if attr not in names or key == "lam":
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[attr] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            key = next((k for k, v in self._ALIASES.items() if v == f.name), f.name)
            out[key] = getattr(self, f.name)
        return out

    def validate(self) -> None:
        def check(name, ok, why):
            if not ok:
                raise ConfigError(f"{name}: {why} (got {getattr(self, name)!r})")

        for name in ("H", "L", "batch_size", "patience"):
            v = getattr(self, name)
            check(name, isinstance(v, int) and not isinstance(v, bool) and v >= 1, "must be an integer >= 1")
        check("max_epochs", isinstance(self.max_epochs, int) and self.max_epochs >= 0, "must be an integer >= 0")
        check("J", self.J is None or (isinstance(self.J, int) and self.J >= 1), "must be null or an integer >= 1")
        check("share_ratings", isinstance(self.share_ratings, bool), "must be true or false")
        check("lam", isinstance(self.lam, (int, float)) and 0 <= self.lam <= 1, "lambda must lie in [0, 1]")
        check("learning_rate", isinstance(self.learning_rate, (int, float)) and self.learning_rate >= 0,
              "must be >= 0")
        check("first_layer_lr_multiplier", isinstance(self.first_layer_lr_multiplier, (int, float))
              and self.first_layer_lr_multiplier > 0, "must be > 0")
        check("weight_decay", isinstance(self.weight_decay, (int, float)) and self.weight_decay >= 0,
              "must be >= 0")
        check("seed", isinstance(self.seed, int) and not isinstance(self.seed, bool), "must be an integer")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=float(self.learning_rate),
            first_layer_lr_multiplier=float(self.first_layer_lr_multiplier),
            weight_decay=float(self.weight_decay),
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.seed,
            cost=CostConfig(float(self.lam)),
        )

    def model_config(self, M: int, K: int) -> ModelConfig:
        return ModelConfig(M=M, K=K, H=self.H, L=self.L, J=self.J, share_ratings=self.share_ratings)


# --- commands ---------------------------------------------------------------

def cmd_prepare(args) -> int:
    triples, (n_users, n_items, K) = cfdata.parse_movielens(
        args.input, _separator(args.separator), args.rescale_half_stars)
    ds = cfdata.dataset_from_triples(triples, K=K, basis=args.basis)
    spec = cfdata.SplitSpec(args.test_fraction, args.valid_fraction, args.seed)
    train_ds, valid_ds, test_ds = cfdata.split_dataset(ds, spec, SeededRng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(cfdata.SPLIT_NAMES, (train_ds, valid_ds, test_ds)):
        cfdata.save_cache(part, out / f"{name}.cfds")
    cfdata.save_id_maps(ds, out / "id_maps.json")
    summary = {
        "N": n_users, "M": n_items, "K": K, "basis": args.basis,
        "entities": ds.num_entities, "targets": ds.num_targets,
        "ratings": len(ds), "train": len(train_ds), "valid": len(valid_ds), "test": len(test_ds),
        "seed": args.seed, "test_fraction": args.test_fraction, "valid_fraction_of_train": args.valid_fraction,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(" ".join(f"{k}={summary[k]}" for k in ("basis", "entities", "targets", "K", "train", "valid", "test")))
    return EXIT_OK


def _separator(tok: str) -> str:
    return {"tab": "\t", "\\t": "\t", "space": " "}.get(tok, tok)


_OVERRIDES = ("data", "out", "H", "L", "J", "share_ratings", "lam", "learning_rate",
              "first_layer_lr_multiplier", "weight_decay", "batch_size", "max_epochs", "patience", "seed")


def resolve_config(args) -> RunConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    cfg = RunConfig.from_dict(doc)
    for name in _OVERRIDES:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    cfg.validate()
    if not cfg.data:
        raise ConfigError("data: a prepared data directory is required")
    if not cfg.out:
        raise ConfigError("out: an output directory is required")
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    splits = cfdata.load_prepared(cfg.data)
    train_ds = splits["train"]
    mcfg = cfg.model_config(train_ds.num_targets, train_ds.K)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    maps = Path(cfg.data) / "id_maps.json"
    if maps.exists():
        shutil.copyfile(maps, out / "id_maps.json")
    result = train(train_ds, splits["valid"], mcfg, cfg.train_config(),
                   log_path=out / LOG_NAME, checkpoint_path=out / CHECKPOINT_NAME)
    print(f"best_epoch={result.best_epoch} valid_rmse={result.best_valid_rmse:.6f} "
          f"checkpoint={out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, mcfg = load_checkpoint(args.checkpoint)
    splits = cfdata.load_prepared(args.data)
    test = splits[args.split]
    report = evaluate_model(params, mcfg, test, splits["train"])
    seed, chash = "NA", "NA"
    resolved = Path(args.checkpoint).parent / CONFIG_NAME
    if resolved.exists():
        doc = json.loads(resolved.read_text())
        seed, chash = doc.get("seed", "NA"), config_hash(doc)
    print(report.to_text())
    extra = {}
    if args.baseline:
        base = item_mean_baseline(splits["train"], test)
        extra["baseline_rmse"] = f"{base:.6f}"
        print(f"item-mean baseline RMSE {base:.6f}")
    print(report.record(seed=seed, config_hash=chash, **extra))
    return EXIT_OK


def _find_id_maps(args):
    candidates = [Path(args.checkpoint).parent / "id_maps.json"]
    if args.data:
        candidates.insert(0, Path(args.data) / "id_maps.json")
    for p in candidates:
        if p.exists():
            return cfdata.load_id_maps(p)[1]
    return None


def _parse_history(text: str, lookup, K: int):
    history = []
    for token in filter(None, (t.strip() for t in text.split(","))):
        try:
            raw_item, raw_rating = token.split(":")
            item, rating = lookup(int(raw_item)), int(raw_rating)
        except (ValueError, KeyError):
            raise cfdata.DataError(f"cannot resolve history token {token!r}") from None
        if not 1 <= rating <= K:
            raise cfdata.DataError(f"history token {token!r}: rating outside 1..{K}")
        history.append((item, rating))
    return history


def cmd_predict(args) -> int:
    params, mcfg = load_checkpoint(args.checkpoint)
    target_ids = _find_id_maps(args)
    if target_ids is None:
        log.warning("no id_maps.json found; treating ids as dense 0-based indices")
        index = {i: i for i in range(mcfg.M)}
    else:
        index = {int(raw): i for i, raw in enumerate(target_ids)}

    def lookup(raw):
        return index[raw]

    history = _parse_history(args.history, lookup, mcfg.K)
    try:
        target = lookup(args.target)
    except KeyError:
        raise cfdata.DataError(f"unknown target id {args.target!r}") from None
    print(f"{predict_rating(params, mcfg, history, target):.6f}")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfnade", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--deterministic", action="store_true",
                        help="single worker, fixed summation order (the only mode implemented)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse, split and cache a rating file")
    p.add_argument("--input", required=True)
    p.add_argument("--separator", default="::", help="field separator; 'tab' for u.data files")
    p.add_argument("--rescale-half-stars", action="store_true")
    p.add_argument("--basis", choices=(cfdata.USER_BASED, cfdata.ITEM_BASED), default=cfdata.USER_BASED)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--test-fraction", type=float, default=0.10)
    p.add_argument("--valid-fraction", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a prepared split")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--H", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--J", type=int)
    p.add_argument("--share-ratings", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--first-layer-lr-multiplier", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report test RMSE of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=cfdata.SPLIT_NAMES, default="test")
    p.add_argument("--baseline", action="store_true", help="also report the item-mean baseline")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict one rating from a history")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--history", default="", help='comma-separated "id:rating" pairs')
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--data", help="prepared data directory holding id_maps.json")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (cfdata.DataError, DimensionMismatch, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
