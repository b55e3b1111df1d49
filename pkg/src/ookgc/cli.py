"""Command-line entry point: ``ookgc <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import TrainConfig
from .evaluation import link_prediction_eval, triple_classification_eval
from .inference import dump_vn
from .kg import SplitSpec, TripleStore, load_store, make_ookg_split, save_manifest, write_tsv
from .model import load_checkpoint, save_checkpoint
from .rules import dump_pool, load_pool, mine_rule_pool
from .trainer import test_time_pipeline, train

FILES = {"train": "train.tsv", "valid": "valid.tsv", "test": "test.tsv", "aux": "aux.tsv"}


def _load_dir(path) -> TripleStore:
    d = Path(path)
    opt = {k: (d / f if (d / f).exists() else None) for k, f in FILES.items()}
    if opt["train"] is None:
        raise SystemExit(f"{d} has no {FILES['train']}")
    return load_store(opt["train"], opt["valid"], opt["test"], opt["aux"])


def _write_dir(store: TripleStore, path) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    write_tsv(d / FILES["train"], store.observed_triples(base_only=True), store.vocab)
    write_tsv(d / FILES["valid"], store.valid, store.vocab)
    write_tsv(d / FILES["test"], store.test, store.vocab)
    if store.auxiliary:
        write_tsv(d / FILES["aux"], store.auxiliary_triples(base_only=True), store.vocab)
        save_manifest(store, d / "manifest.json")


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {k: v for k, v in (("mode", args.mode), ("seed", args.seed), ("epochs", args.epochs)) if v is not None}
    return TrainConfig.from_dict({**cfg.to_dict(), **overrides}) if overrides else cfg


def _restore(args):
    store = _load_dir(args.data)
    model, meta = load_checkpoint(args.checkpoint)
    extra = meta.get("extra", {})
    if extra.get("entities") and extra["entities"] != store.vocab.entities:
        raise SystemExit("checkpoint vocabulary does not match the dataset directory")
    cfg = TrainConfig.from_dict(extra.get("train_config", {}))
    pool = load_pool(extra["pool"], store.vocab) if extra.get("pool") else None
    return store, model, cfg, pool


def cmd_make_splits(args) -> int:
    if args.synthetic is not None:
        from .synthetic import ookg_benchmark

        store = ookg_benchmark(args.synthetic, args.amount, args.valid_from_test).store
    else:
        full = _load_dir(args.data)
        spec = SplitSpec(args.split_mode, args.amount, args.seed, args.policy, args.valid_from_test)
        store = make_ookg_split(full, spec)
    _write_dir(store, args.out)
    print(
        f"ookg={len(store.ookg)} observed={len(store.observed_triples(True))} "
        f"aux={len(store.auxiliary_triples(True))} valid={len(store.valid)} test={len(store.test)}"
    )
    return 0


def cmd_mine_rules(args) -> int:
    store = _load_dir(args.data)
    pool = mine_rule_pool(
        store.index, args.alpha_hc, args.alpha_sc, args.alpha_pcra,
        correlations=not args.no_correlations, seed=args.seed,
    )
    text = dump_pool(pool, store.vocab)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    print(f"{len(pool.logic_rules)} logic rules, {len(pool.correlations)} correlations", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    store = _load_dir(args.data)
    cfg = _config(args)
    pool = load_pool(Path(args.rules).read_text(encoding="utf-8"), store.vocab) if args.rules else None
    res = train(store, cfg, pool=pool, log_path=args.log)
    extra = {
        "train_config": cfg.to_dict(),
        "pool": dump_pool(res.pool, store.vocab) if res.pool is not None else "",
        "entities": store.vocab.entities,
        "relations": store.vocab.relations,
    }
    save_checkpoint(args.out, res.model, extra)
    if res.best_valid is not None:
        print(res.best_valid.table())
    return 0


def cmd_eval_lp(args) -> int:
    store, model, cfg, pool = _restore(args)
    rep = link_prediction_eval(model, store, pool, cfg, split=args.split)
    print(rep.table())
    if args.json:
        Path(args.json).write_text(rep.to_json() + "\n", encoding="utf-8")
    return 0


def cmd_eval_tc(args) -> int:
    store, model, cfg, pool = _restore(args)
    rep = triple_classification_eval(model, store, pool, cfg)
    print(rep.table())
    if args.json:
        Path(args.json).write_text(rep.to_json() + "\n", encoding="utf-8")
    return 0


def cmd_report_vn(args) -> int:
    store, model, cfg, pool = _restore(args)
    graph, _ = test_time_pipeline(model, store, pool, cfg)
    text = dump_vn(graph.vn, store.vocab, args.out)
    if not args.out:
        sys.stdout.write(text)
    print(f"{len(graph.vn)} virtual triples", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ookgc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-splits", help="carve OOKG entities out of a transductive dataset")
    s.add_argument("--data", help="directory with train.tsv / valid.tsv / test.tsv")
    s.add_argument("--synthetic", type=int, metavar="SEED", help="write the synthetic benchmark instead")
    s.add_argument("--split-mode", choices=["subject", "object", "both"], default="subject")
    s.add_argument("--amount", type=float, default=10.0)
    s.add_argument("--policy", choices=["triples", "entities", "count"], default="triples")
    s.add_argument("--valid-from-test", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_splits)

    s = sub.add_parser("mine-rules", help="mine logic rules and inter-rule correlations")
    s.add_argument("--data", required=True)
    s.add_argument("--alpha-hc", type=float, default=0.01)
    s.add_argument("--alpha-sc", type=float, default=0.01)
    s.add_argument("--alpha-pcra", type=float, default=0.01)
    s.add_argument("--no-correlations", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_mine_rules)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="JSON document with TrainConfig fields")
    s.add_argument("--rules", help="rule pool file from mine-rules")
    s.add_argument("--mode", choices=["no_rules", "hard_rules", "soft_rules", "full"])
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--log", help="JSON-lines training log")
    s.add_argument("--out", required=True, help="checkpoint path (.npz)")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval-lp", cmd_eval_lp, "filtered link prediction"),
        ("eval-tc", cmd_eval_tc, "triple classification"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--data", required=True)
        s.add_argument("--checkpoint", required=True)
        if name == "eval-lp":
            s.add_argument("--split", choices=["valid", "test"], default="test")
        s.add_argument("--json", help="also write the report as JSON")
        s.set_defaults(func=func)

    s = sub.add_parser("report-vn", help="list test-time virtual neighbors with soft labels")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report_vn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "make-splits" and args.synthetic is None and not args.data:
        raise SystemExit("make-splits needs --data or --synthetic")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
