"""Command-line entry point: prepare / train / eval / analyze.

Every stochastic choice in a run flows from the single --seed flag, and
artifact-producing commands write a manifest first, so a run can be
reproduced from its manifest alone. Exit codes: 0 success, 2 usage or
contract errors, 3 data errors, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__, evaluate
from .data import (
    Dataset,
    LogFormat,
    bundle_fingerprint,
    generate_synthetic,
    load_sessions,
    prepare_dataset,
    read_bundle,
    write_bundle,
)
from .errors import ContractError, DataError, DivergenceError
from .model import ParameterStore, SessionGraphModel
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

ABLATION_FLAGS = {
    "contrast": "contrast",
    "weakneg": "weak_negatives",
    "norm": "normalized_scoring",
    "pe": "positional",
}


def _write_manifest(path: Path, command: str, payload: dict):
    manifest = {"tool": "contrarec", "version": __version__, "command": command}
    manifest.update(payload)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return manifest


def _load_checkpoint(path, dataset: Dataset):
    store, meta = ParameterStore.load(path)
    expected = dataset.vocabulary.content_hash()
    found = meta.get("vocab_hash")
    if found is not None and found != expected:
        raise DataError(f"{path}: checkpoint was trained on a different vocabulary")
    if store.num_items != dataset.num_items:
        raise DataError(f"{path}: checkpoint has {store.num_items} items, "
                        f"bundle has {dataset.num_items}")
    return SessionGraphModel(store), meta


# ---------------------------------------------------------------------------
# prepare


def cmd_prepare(args) -> int:
    if args.synthetic:
        dataset = generate_synthetic(
            num_items=args.num_items, num_sessions=args.num_sessions,
            popularity_exponent=args.popularity_exponent,
            last_item_collision_rate=args.collision_rate, seed=args.seed,
            min_session_len=args.min_gen_len, max_session_len=args.max_gen_len,
            num_clusters=args.num_clusters, in_cluster_prob=args.in_cluster_prob,
            repeat_prob=args.repeat_prob, test_fraction=args.test_fraction)
    else:
        if args.input is None:
            raise ContractError("prepare: need --input unless --synthetic is given")
        fmt = LogFormat(delimiter=args.delimiter, session_col=args.session_col,
                        item_col=args.item_col, order_col=args.order_col,
                        has_header=args.header)
        log = load_sessions(args.input, fmt)
        dataset = prepare_dataset(
            log, min_item_count=args.min_item_count,
            min_session_len=args.min_session_len,
            max_session_len=args.max_session_len,
            test_fraction=args.test_fraction,
            recent_fraction=args.recent_fraction)
    out = Path(args.out)
    write_bundle(dataset, out)
    fingerprint = bundle_fingerprint(out)
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "prepare", {
        "seed": args.seed,
        "synthetic": bool(args.synthetic),
        "input": None if args.synthetic else str(args.input),
        "arguments": vars(args) | {"func": None},
        "bundle": str(out),
        "bundle_fingerprint": fingerprint,
        "stats": dataset.stats,
    })
    for key in ("clicks", "train_sessions", "test_sessions", "items", "avg_length"):
        print(f"{key}={dataset.stats[key]}")
    print(f"dropped_test_sessions={dataset.dropped_test_sessions}")
    print(f"bundle={out}")
    print(f"fingerprint={fingerprint}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _resolve_config(args) -> TrainConfig:
    overrides = list(args.set or [])
    for spec in args.ablation or []:
        name, _, value = spec.partition("=")
        name = name.strip().lower()
        if name not in ABLATION_FLAGS:
            raise ContractError(f"train: unknown ablation flag {name!r} "
                                f"(expected one of {sorted(ABLATION_FLAGS)})")
        overrides.append(f"{ABLATION_FLAGS[name]}={value.strip() or 'off'}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.epochs is not None:
        overrides.append(f"epochs={args.epochs}")
    return TrainConfig.from_sources(args.config, overrides)


def cmd_train(args) -> int:
    dataset = read_bundle(args.bundle)
    config = _resolve_config(args)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = run_dir / "checkpoint.npz"
    report_path = run_dir / "report.jsonl"
    _write_manifest(run_dir / "manifest.json", "train", {
        "seed": config.seed,
        "bundle": str(args.bundle),
        "bundle_fingerprint": bundle_fingerprint(args.bundle),
        "config": config.to_dict(),
        "artifacts": {"checkpoint": str(checkpoint_path), "report": str(report_path)},
    })
    vocab_hash = dataset.vocabulary.content_hash()
    try:
        store, report = train(dataset, config)
    except DivergenceError as exc:
        if exc.params is not None:
            exc.params.save(checkpoint_path, extra_meta={"vocab_hash": vocab_hash,
                                                         "diverged": True})
            print(f"divergence: saved last finite parameters to {checkpoint_path}",
                  file=sys.stderr)
        raise
    store.save(checkpoint_path, extra_meta={"vocab_hash": vocab_hash,
                                            "seed": config.seed})
    report.write_jsonl(report_path)
    for record in report.epochs:
        print(f"epoch={record.epoch} lr={record.lr:g} "
              f"loss={record.loss_total_mean:.6f} pred={record.loss_pred_mean:.6f} "
              f"contrast={record.loss_contrast_mean:.6f}")
    print(f"checkpoint={checkpoint_path}")
    print(f"report={report_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    dataset = read_bundle(args.bundle)
    model, _ = _load_checkpoint(args.checkpoint, dataset)
    if not dataset.test:
        raise DataError("eval: bundle has no test sessions")
    k = args.k
    labels = [s.label for s in dataset.test]
    phi = evaluate.train_popularity(dataset.train, dataset.num_items)
    rows = []
    ranked = evaluate.rank_sessions(model, dataset.test, k,
                                    exclude_own_items=args.exclude_own_items)
    arp_value, _ = evaluate.arp(ranked, phi, k)
    rows.append(("model", evaluate.recall_at_k(ranked, labels, k),
                 evaluate.mrr_at_k(ranked, labels, k), arp_value))
    for name in (args.baselines.split(",") if args.baselines else []):
        name = name.strip().lower()
        if not name:
            continue
        blists = evaluate.baseline_rankings(name, dataset.train, dataset.test,
                                            dataset.num_items, k)
        b_arp, _ = evaluate.arp(blists, phi, k)
        rows.append((name, evaluate.recall_at_k(blists, labels, k),
                     evaluate.mrr_at_k(blists, labels, k), b_arp))
    header = f"method,recall@{k},mrr@{k},arp"
    lines = [header] + [f"{n},{r:.6f},{m:.6f},{a:.6f}" for n, r, m, a in rows]
    for line in lines:
        print(line)
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> int:
    dataset = read_bundle(args.bundle)
    model, _ = _load_checkpoint(args.checkpoint, dataset)
    if not dataset.test:
        raise DataError("analyze: bundle has no test sessions")
    if args.last_item == "auto":
        target = evaluate.most_common_last_item(dataset.test)
    else:
        target = int(args.last_item)
    cohort = evaluate.session_cohort(dataset.test, target)
    if len(cohort) < 2:
        raise ContractError(f"analyze: only {len(cohort)} test sessions end in "
                            f"item {target}; need at least 2")
    k = args.k
    phi = evaluate.train_popularity(dataset.train, dataset.num_items)

    def describe(checkpoint_path):
        mdl, _ = _load_checkpoint(checkpoint_path, dataset)
        ranked = evaluate.rank_sessions(mdl, cohort, k)
        confusion = evaluate.confusion_analysis(ranked, k)
        full = evaluate.rank_sessions(mdl, dataset.test, k)
        arp_value, _ = evaluate.arp(full, phi, k)
        return confusion, arp_value

    confusion, arp_value = describe(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    print(f"last_item={target} cohort_size={len(cohort)}")
    print(f"distinct_items={confusion.distinct_items} arp={arp_value:.6f}")
    if args.compare:
        other, other_arp = describe(args.compare)
        items = sorted(set(confusion.item_counts) | set(other.item_counts))
        rank_a = {item: r for item, _, r in confusion.rows}
        rank_b = {item: r for item, _, r in other.rows}
        lines = ["item_id,count,rank,count_compare,rank_compare"]
        for item in items:
            lines.append(",".join(str(v) for v in (
                item, confusion.item_counts.get(item, 0), rank_a.get(item, ""),
                other.item_counts.get(item, 0), rank_b.get(item, ""))))
        path = out_dir / "confusion_compare.csv"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"compare_distinct_items={other.distinct_items} "
              f"compare_arp={other_arp:.6f}")
        print(f"csv={path}")
    else:
        path = out_dir / "confusion.csv"
        path.write_text("\n".join(confusion.csv_rows()) + "\n", encoding="utf-8")
        print(f"csv={path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contrarec",
        description="Contrastive graph session recommender (framework-free).")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a dataset bundle from a log or generator")
    p.add_argument("--input", type=Path, help="delimited session log")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--session-col", type=int, default=0)
    p.add_argument("--item-col", type=int, default=1)
    p.add_argument("--order-col", type=int, default=2)
    p.add_argument("--header", action="store_true", help="skip the first line")
    p.add_argument("--min-item-count", type=int, default=5)
    p.add_argument("--min-session-len", type=int, default=2)
    p.add_argument("--max-session-len", type=int, default=50)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--recent-fraction", type=float, default=None,
                   help="keep only the most recent fraction of sessions")
    p.add_argument("--synthetic", action="store_true",
                   help="generate data instead of reading --input")
    p.add_argument("--num-items", type=int, default=50)
    p.add_argument("--num-sessions", type=int, default=500)
    p.add_argument("--popularity-exponent", type=float, default=1.0)
    p.add_argument("--collision-rate", type=float, default=0.0)
    p.add_argument("--num-clusters", type=int, default=2)
    p.add_argument("--in-cluster-prob", type=float, default=0.85)
    p.add_argument("--repeat-prob", type=float, default=0.0)
    p.add_argument("--min-gen-len", type=int, default=3)
    p.add_argument("--max-gen-len", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a bundle")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--config", type=Path, help="key=value config file with sections")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--ablation", action="append", metavar="NAME=on|off",
                   help="flip contrast / weakneg / norm / pe (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against a bundle")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--baselines", default="",
                   help="comma list from pop,spop,itemknn")
    p.add_argument("--exclude-own-items", action="store_true")
    p.add_argument("--out", type=Path, help="also write the report as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="shared-last-item confusion analysis")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--last-item", default="auto",
                   help="item id, or 'auto' for the most frequent test last item")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--compare", type=Path, help="second checkpoint for side-by-side")
    p.add_argument("--out", type=Path, default=Path("."))
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
