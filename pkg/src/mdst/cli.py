"""Command-line entry point.

Commands: prepare, synth, train, eval-rank, generate, judge, ablate,
inspect-state. Every command writes a run manifest into its output directory;
report-producing commands emit TSV tables and PNG figures side by side.

The data root (``--data`` or the MDST_DATA_DIR environment variable) uses the
layout::

    DATA_DIR/
      {split}.json           corpus in the VisDial v1.0 schema
      features_{split}/      feature store (manifest.json + per-image .bin)
      worlds_{split}.json    synthetic worlds sidecar (synthetic data only)
      dense_{split}.json     dense relevance annotations (optional)
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import (SynthConfig, TrainConfig, config_to_dict,
                     load_synth_config, load_train_config)
from .data import (FeatureStore, attach_dense_relevance, load_visdial,
                   write_feature_store)
from .errors import MdstError
from .judge import (compute_jacc_avglen, judge_with_human_csv,
                    judge_with_oracle, per_round_breakdown)
from .metrics import MetricsReport
from .vocab import build_vocabulary, Vocabulary

logger = logging.getLogger("mdst")

ABLATION_VARIANTS = [
    ("full", {}),
    ("-QGDS-PDS", {"use_qgds_pds": False}),
    ("-switching", {"use_switching": False}),
    ("-NULL-ALL", {"use_pseudo_objects": False}),
]


def _data_dir(args) -> Path:
    root = args.data or os.environ.get("MDST_DATA_DIR")
    if not root:
        raise MdstError("no data directory: pass --data or set MDST_DATA_DIR")
    path = Path(root)
    if not path.is_dir():
        raise MdstError(f"data directory not found: {path}")
    return path


def _load_split(data_dir: Path, split: str, dense: bool = True):
    corpus_path = data_dir / f"{split}.json"
    if not corpus_path.exists():
        raise MdstError(f"corpus file not found: {corpus_path}")
    corpus = load_visdial(corpus_path, split)
    dense_path = data_dir / f"dense_{split}.json"
    if dense and dense_path.exists():
        attach_dense_relevance(corpus, dense_path)
    store_path = data_dir / f"features_{split}"
    if not store_path.is_dir():
        raise MdstError(f"feature store not found: {store_path}")
    return corpus, FeatureStore(store_path)


def _load_worlds(data_dir: Path, split: str):
    from .synth import load_worlds
    worlds_path = data_dir / f"worlds_{split}.json"
    if not worlds_path.exists():
        raise MdstError(
            f"no synthetic worlds sidecar at {worlds_path}; the oracle judge "
            "only applies to synthetic data")
    return load_worlds(worlds_path)


def _resolve_train_config(args) -> TrainConfig:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    if getattr(args, "batch_size", None) is not None:
        cfg.batch_size = args.batch_size
    if getattr(args, "discriminative", False):
        cfg.discriminative = True
    return cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    from .report import ensure_outdir, write_manifest, write_tsv
    data_dir = _data_dir(args)
    corpus, _ = _load_split(data_dir, args.split)
    vocab = build_vocabulary(corpus, min_freq=args.min_freq)
    out = ensure_outdir(args.out, args.overwrite)
    vocab.save(out / "vocab.json")
    rows = [[rec.image_id, len(rec.rounds), rec.n_answerable] for rec in corpus.records]
    write_tsv(out / "corpus_stats.tsv", ["image_id", "rounds", "answerable"], rows)
    write_manifest(out, "prepare",
                   {"split": args.split, "min_freq": args.min_freq},
                   args.seed, extra={"vocab_size": len(vocab),
                                     "dialogs": len(corpus)})
    print(f"prepared vocabulary of {len(vocab)} tokens from "
          f"{len(corpus)} dialogs -> {out}")
    return 0


def cmd_synth(args) -> int:
    from .report import ensure_outdir, write_manifest
    from .synth import (corpus_to_visdial_json, dense_annotations_json,
                        generate_corpus, save_worlds)
    cfg = load_synth_config(args.config) if args.config else SynthConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.dialogs is not None:
        cfg = dataclasses.replace(cfg, n_dialogs=args.dialogs)
    n_val = args.val_dialogs if args.val_dialogs is not None else max(1, cfg.n_dialogs // 10)
    out = ensure_outdir(args.out, args.overwrite)
    splits = {"train": (cfg.n_dialogs, cfg.seed), "val": (n_val, cfg.seed + 1)}
    for split, (n, seed) in splits.items():
        corpus, features, worlds = generate_corpus(cfg, split=split,
                                                   n_dialogs=n, seed=seed)
        (out / f"{split}.json").write_text(
            json.dumps(corpus_to_visdial_json(corpus)))
        write_feature_store(out / f"features_{split}", features)
        save_worlds(worlds, corpus.records, out / f"worlds_{split}.json")
        dense = dense_annotations_json(corpus)
        (out / f"dense_{split}.json").write_text(json.dumps(dense))
        print(f"synth {split}: {n} dialogs x {cfg.n_rounds} rounds")
    write_manifest(out, "synth", config_to_dict(cfg), cfg.seed,
                   extra={"val_dialogs": n_val})
    return 0


def cmd_train(args) -> int:
    from .report import (ensure_outdir, fig_training_curves, write_manifest,
                         write_tsv)
    from .training import train
    data_dir = _data_dir(args)
    cfg = _resolve_train_config(args)
    corpus, features = _load_split(data_dir, args.split)
    if args.vocab:
        corpus.vocab = Vocabulary.load(args.vocab)
    out = ensure_outdir(args.out, args.overwrite)
    result = train(cfg, corpus, features, out_dir=out)
    write_tsv(out / "train_log.tsv", ["step", "epoch", "loss", "lr"],
              [[r["step"], r["epoch"], r["loss"], r["lr"]] for r in result.log_rows])
    fig_training_curves(result.log_rows, out / "figures" / "training_curves.png")
    write_manifest(out, "train", config_to_dict(cfg), cfg.seed,
                   extra={"final_checkpoint": str(result.final_path),
                          "epoch_losses": result.epoch_losses})
    print(f"trained {cfg.epochs} epochs; final loss "
          f"{result.epoch_losses[-1]:.4f}; checkpoint {result.final_path}")
    return 0


def cmd_eval_rank(args) -> int:
    from .checkpoint import load_checkpoint
    from .report import (ensure_outdir, fig_rank_histogram, write_manifest,
                         write_tsv)
    from .training import evaluate_ranking
    data_dir = _data_dir(args)
    corpus, features = _load_split(data_dir, args.split)
    model, vocab, header = load_checkpoint(args.checkpoint)
    report = evaluate_ranking(model, vocab, corpus, features,
                              batch_size=args.batch_size or 32)
    out = ensure_outdir(args.out, args.overwrite)
    report.save_json(out / "metrics.json")
    write_tsv(out / "metrics.tsv", MetricsReport.COLUMNS, [report.row()])
    write_tsv(out / "per_round.tsv", ["image_id", "round", "rank", "ndcg"],
              [[e["image_id"], e["round"], e["rank"], e.get("ndcg", "")]
               for e in report.per_dialog])
    fig_rank_histogram([e["rank"] for e in report.per_dialog],
                       out / "figures" / "rank_histogram.png")
    write_manifest(out, "eval-rank",
                   {"split": args.split, "checkpoint": str(args.checkpoint)},
                   args.seed, extra={"n_rounds": report.n_rounds,
                                     "n_skipped": report.n_skipped})
    print(report.to_table())
    if report.n_skipped:
        print(f"skipped {report.n_skipped} records without candidate lists")
    return 0


def cmd_generate(args) -> int:
    from .checkpoint import load_checkpoint
    from .generation import generate_dialogues
    from .judge import content_length
    from .report import (ensure_outdir, fig_answer_lengths, write_manifest,
                         write_tsv)
    data_dir = _data_dir(args)
    corpus, features = _load_split(data_dir, args.split)
    model, vocab, _ = load_checkpoint(args.checkpoint)
    out = ensure_outdir(args.out, args.overwrite)
    dump_dir = out / "state_dumps" if args.dump_states else None
    rows = generate_dialogues(model, vocab, corpus, features,
                              rounds=args.rounds,
                              out_path=out / "dialogs.jsonl",
                              state_dump_dir=dump_dir,
                              batch_size=args.batch_size or 32)
    lengths = [content_length(r["answer"]) for r in rows]
    truncated = sum(r["truncated"] for r in rows)
    write_tsv(out / "gen_summary.tsv",
              ["dialogs", "rounds", "avg_len", "truncated"],
              [[len(corpus), args.rounds,
                round(sum(lengths) / max(1, len(lengths)), 4), truncated]])
    fig_answer_lengths(lengths, out / "figures" / "answer_lengths.png")
    write_manifest(out, "generate",
                   {"split": args.split, "rounds": args.rounds,
                    "checkpoint": str(args.checkpoint)}, args.seed,
                   extra={"n_rows": len(rows)})
    print(f"generated {len(rows)} rounds over {len(corpus)} dialogs -> "
          f"{out / 'dialogs.jsonl'}")
    return 0


def _judge_report(judged, out, args) -> int:
    from .report import (ensure_outdir, fig_answer_lengths, fig_jacc_per_round,
                         write_manifest, write_tsv)
    from .judge import content_length
    jacc, avg_len = compute_jacc_avglen(judged)
    breakdown = per_round_breakdown(judged)
    total = sum(len(d.rounds) for d in judged)
    correct = sum(r.verdict for d in judged for r in d.rounds)
    payload = {
        "jacc": jacc, "avg_len": avg_len, "n_pairs": total,
        "correct": correct, "incorrect": total - correct,
        "provenance": judged[0].provenance if judged else None,
        "per_round": breakdown,
    }
    (out / "judge.json").write_text(json.dumps(payload, indent=2))
    write_tsv(out / "judge.tsv",
              ["n_pairs", "correct", "incorrect", "jacc", "avg_len"],
              [[total, correct, total - correct, round(jacc, 4),
                round(avg_len, 4)]])
    fig_jacc_per_round(breakdown, out / "figures" / "jacc_per_round.png")
    lengths = [content_length(r.generated) for d in judged for r in d.rounds]
    fig_answer_lengths(lengths, out / "figures" / "answer_lengths.png")
    print(f"JACC {jacc:.1f}% ({correct}/{total} correct), AvgLen {avg_len:.2f}")
    return 0


def cmd_judge(args) -> int:
    from .generation import load_generated
    from .report import ensure_outdir, write_manifest
    rows = load_generated(args.generated)
    if args.human_csv:
        judged = judge_with_human_csv(rows, args.human_csv)
    else:
        data_dir = _data_dir(args)
        worlds = _load_worlds(data_dir, args.split)
        judged = judge_with_oracle(rows, worlds)
    out = ensure_outdir(args.out, args.overwrite)
    status = _judge_report(judged, out, args)
    write_manifest(out, "judge",
                   {"generated": str(args.generated), "split": args.split,
                    "judge": "human-import" if args.human_csv else "oracle"},
                   args.seed)
    return status


def cmd_ablate(args) -> int:
    from .generation import generate_dialogues
    from .report import (aligned_table, ensure_outdir, fig_ablation,
                         write_manifest, write_tsv)
    from .training import train
    data_dir = _data_dir(args)
    base_cfg = _resolve_train_config(args)
    corpus, features = _load_split(data_dir, args.split)
    val_corpus, val_features = _load_split(data_dir, args.val_split)
    worlds = _load_worlds(data_dir, args.val_split)
    rounds = args.rounds or max(len(r.rounds) for r in val_corpus.records)
    out = ensure_outdir(args.out, args.overwrite)

    results = []
    for name, overrides in ABLATION_VARIANTS:
        model_cfg = dataclasses.replace(base_cfg.model, **overrides)
        cfg = dataclasses.replace(base_cfg, model=model_cfg)
        variant_dir = out / name.strip("-").lower().replace("-", "_")
        variant_dir.mkdir(parents=True, exist_ok=True)
        logger.info("ablation variant %s", name)
        result = train(cfg, corpus, features, out_dir=variant_dir,
                       save_every_epoch=False)
        rows = generate_dialogues(result.model, result.vocab, val_corpus,
                                  val_features, rounds=rounds,
                                  out_path=variant_dir / "dialogs.jsonl")
        judged = judge_with_oracle(rows, worlds)
        jacc, avg_len = compute_jacc_avglen(judged)
        results.append({"variant": name, "jacc": jacc, "avg_len": avg_len,
                        "train_loss": result.epoch_losses[-1]})
        print(f"{name}: JACC {jacc:.1f}%  AvgLen {avg_len:.2f}")

    header = ["variant", "JACC", "AvgLen", "train_loss"]
    table_rows = [[r["variant"], round(r["jacc"], 2), round(r["avg_len"], 2),
                   round(r["train_loss"], 4)] for r in results]
    write_tsv(out / "ablation.tsv", header, table_rows)
    (out / "ablation.json").write_text(json.dumps(results, indent=2))
    fig_ablation(results, out / "figures" / "ablation_bars.png")
    write_manifest(out, "ablate", config_to_dict(base_cfg), base_cfg.seed,
                   extra={"rounds": rounds, "variants": [r["variant"] for r in results]})
    print(aligned_table(header, table_rows))
    return 0


def cmd_inspect_state(args) -> int:
    from .checkpoint import load_checkpoint
    from .inspect import attribution_rows, collect_attributions, row_labels
    from .report import (ensure_outdir, fig_state_heatmap, write_manifest,
                         write_tsv)
    data_dir = _data_dir(args)
    corpus, features = _load_split(data_dir, args.split)
    if not 0 <= args.dialog < len(corpus.records):
        raise MdstError(f"--dialog {args.dialog} out of range "
                        f"[0,{len(corpus.records)})")
    record = corpus.records[args.dialog]
    model, vocab, _ = load_checkpoint(args.checkpoint)
    world = None
    worlds_path = data_dir / f"worlds_{args.split}.json"
    if worlds_path.exists():
        from .synth import load_worlds
        world = load_worlds(worlds_path).get(record.image_id)
    attributions = collect_attributions(model, vocab, record,
                                        features.load(record.image_id),
                                        max_rounds=args.rounds)
    labels = row_labels(model, world)
    out = ensure_outdir(args.out, args.overwrite)
    header = ["stage", "token"]
    for k in range(args.topk):
        header += [f"row{k + 1}", f"p{k + 1}"]
    write_tsv(out / "attributions.tsv", header,
              attribution_rows(attributions, labels, args.topk))
    for att in attributions:
        fig_state_heatmap(att.beta, att.tokens, labels,
                          out / "figures" / f"beta_stage_{att.stage:02d}.png",
                          title=f"stage {att.stage}: {att.text[:50]}")
    write_manifest(out, "inspect-state",
                   {"split": args.split, "dialog": args.dialog,
                    "checkpoint": str(args.checkpoint)}, args.seed)
    print(f"wrote {len(attributions)} stage attributions for dialog "
          f"{record.image_id} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdst",
        description="Dialogue-state tracking for visual dialog: data "
                    "preparation, training, evaluation, generation, and "
                    "state inspection.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--data", help="data root (default: $MDST_DATA_DIR)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--overwrite", action="store_true",
                       help="reuse a non-empty output directory")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("prepare", help="build the vocabulary from a corpus")
    common(p)
    p.add_argument("--split", default="train")
    p.add_argument("--min-freq", type=int, default=1)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic grounded-dialog corpus")
    p.add_argument("--config", help="key-value synthetic config file")
    p.add_argument("--dialogs", type=int, default=None,
                   help="training dialogs (overrides config)")
    p.add_argument("--val-dialogs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--split", default="train")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--vocab", help="reuse a prepared vocab.json")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--discriminative", action="store_true",
                   help="enable the candidate-ranking head")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-rank", help="rank candidate answers and report metrics")
    common(p)
    p.add_argument("--split", default="val")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_eval_rank)

    p = sub.add_parser("generate", help="generate answers with greedy decoding")
    common(p)
    p.add_argument("--split", default="val")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--dump-states", action="store_true",
                   help="dump per-round language states")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("judge", help="judge generated answers (oracle or human CSV)")
    common(p)
    p.add_argument("--split", default="val")
    p.add_argument("--generated", required=True, help="dialogs.jsonl from generate")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--oracle", action="store_true",
                       help="judge with the synthetic world oracle")
    group.add_argument("--human-csv", help="CSV of human verdicts "
                                           "(image_id,round,verdict)")
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("ablate", help="train and compare the ablation variants")
    common(p)
    p.add_argument("--split", default="train")
    p.add_argument("--val-split", default="val")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--rounds", type=int, default=None,
                   help="generation rounds for judging (default: corpus rounds)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-state",
                       help="dump per-round state-write attributions")
    common(p)
    p.add_argument("--split", default="val")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dialog", type=int, default=0, help="dialog index")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--topk", type=int, default=3)
    p.set_defaults(func=cmd_inspect_state)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MdstError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
