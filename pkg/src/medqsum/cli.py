"""Command-line entry point: ``medqsum <subcommand>``.

Exit codes: 0 success, 1 input/format error, 2 nothing to remove
(``dedup --fail-if-clean``), 3 empty entity dictionary, 4 training diverged,
5 checkpoint incompatible with the vocabulary or config.

Set ``MEDQSUM_CACHE_DIR`` to move the external-NER response cache
(default ``~/.cache/medqsum``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shlex
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

from medqsum import __version__
from medqsum.corpus import (
    CorpusError,
    Dataset,
    SplitSet,
    check_leakage,
    deduplicate,
    load_dataset,
    save_dataset,
    split_dataset,
)
from medqsum.entities import (
    ExternalNERRecognizer,
    FallbackRecognizer,
    LexiconRecognizer,
    RecognizerError,
    build_entity_dictionary,
    focus_identification_rate,
)
from medqsum.evaluation import MetricsReport, ReferenceEcho, evaluate, format_table
from medqsum.model import CheckpointError, load_checkpoint, read_manifest
from medqsum.negatives import build_negative_pool, load_pool, save_pool
from medqsum.training import KEY_HELP, TrainConfig, TrainingDiverged, train

log = logging.getLogger("medqsum")

EXIT_OK, EXIT_INPUT, EXIT_CLEAN, EXIT_NO_ENTITIES, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5


def cache_dir() -> Path:
    return Path(os.environ.get("MEDQSUM_CACHE_DIR", Path.home() / ".cache" / "medqsum"))


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, args: argparse.Namespace, inputs: list, config: dict | None = None, seed=None) -> None:
    manifest = {
        "command": args.command,
        "argv": getattr(args, "argv", None),
        "config": config,
        "dataset_hashes": {str(p): file_hash(p) for p in inputs if p and Path(p).is_file()},
        "seed": seed,
        "code_version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _load(args, path) -> Dataset:
    return load_dataset(path, args.format, chq_field=args.chq_field, faq_field=args.faq_field, id_field=args.id_field)


class CachedRecognizer:
    """Persists external-NER answers per (command, text) under the cache dir."""

    def __init__(self, inner: ExternalNERRecognizer):
        self.inner = inner
        tag = hashlib.sha256(json.dumps(inner.command).encode()).hexdigest()[:16]
        self.path = cache_dir() / "ner" / f"{tag}.jsonl"
        self.memo: dict[str, list] = {}
        if self.path.is_file():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                rec = json.loads(line)
                self.memo[rec["text"]] = rec["spans"]

    def recognize(self, text):
        from medqsum.entities import EntitySpan

        if text not in self.memo:
            spans = self.inner.recognize(text)
            self.memo[text] = [s.to_json() for s in spans]
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps({"text": text, "spans": self.memo[text]}, ensure_ascii=False) + "\n")
        return [EntitySpan.from_json(s) for s in self.memo[text]]


def _recognizer(args):
    lexicon = LexiconRecognizer.from_file(args.lexicon) if args.lexicon else LexiconRecognizer.bundled()
    if getattr(args, "ner_command", None):
        return FallbackRecognizer(CachedRecognizer(ExternalNERRecognizer(shlex.split(args.ner_command))), lexicon)
    return lexicon


# --------------------------------------------------------------------------
# subcommands


def cmd_dedup(args) -> int:
    report_path = Path(args.report)
    write_manifest(report_path.with_suffix(".manifest.json"), args, [args.input])
    ds = _load(args, args.input)
    clean, report = deduplicate(ds, near=args.near, threshold=args.threshold)
    save_dataset(clean, args.output)
    report_path.write_text(json.dumps(report.to_json(), indent=1) + "\n", encoding="utf-8")
    print(f"{report.total} pairs, {report.removed} duplicates removed, {report.retained} retained")
    if report.removed == 0 and args.fail_if_clean:
        return EXIT_CLEAN
    return EXIT_OK


def cmd_split(args) -> int:
    out = Path(args.out_dir)
    write_manifest(out / "split.manifest.json", args, [args.input], seed=args.seed)
    ds = _load(args, args.input)
    splits = split_dataset(ds, tuple(args.sizes), args.seed)
    for name, part in splits.items():
        save_dataset(part, out / f"{name}.jsonl")
    leaks = check_leakage(splits)
    print(" ".join(f"{n}={len(d)}" for n, d in splits.items()) + f" leaks={len(leaks)}")
    return EXIT_OK


def cmd_leakage(args) -> int:
    splits = SplitSet(*(_load(args, p) for p in (args.train, args.dev, args.test)))
    report = check_leakage(splits)
    text = json.dumps(report.to_json(), indent=1, ensure_ascii=False) + "\n"
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    print(f"{len(report)} normalized pairs occur in more than one split")
    return EXIT_OK


def cmd_negatives(args) -> int:
    out = Path(args.out_dir)
    write_manifest(out / "run_manifest.json", args, [args.train, args.lexicon], seed=args.seed)
    train_set = _load(args, args.train)
    recognizer = _recognizer(args)
    dictionary = build_entity_dictionary(train_set, recognizer)
    fir = focus_identification_rate(train_set, recognizer)
    print(f"FIR {fir:.6f} ({round(fir * len(train_set))}/{len(train_set)})")
    if not len(dictionary):
        print("error: no medical entities found in training summaries; cannot build hard negatives", file=sys.stderr)
        return EXIT_NO_ENTITIES
    pool = build_negative_pool(train_set, recognizer, dictionary, args.X, args.seed, scope=args.scope)
    dictionary.save(out / "dictionary.json")
    save_pool(pool, out / "pool.jsonl")
    n_neg = sum(len(h) for h in pool.values())
    print(f"dictionary {len(dictionary)} entities; pool {n_neg} negatives for {len(pool)} pairs")
    return EXIT_OK


def _train_overrides(args) -> dict:
    return {f.name: getattr(args, f"cfg_{f.name}") for f in fields(TrainConfig)
            if getattr(args, f"cfg_{f.name}") is not None}


def cmd_train(args) -> int:
    if args.print_defaults:
        print(TrainConfig().dumps(), end="")
        return EXIT_OK
    if not (args.train and args.out_dir):
        print("error: --train and --out-dir are required", file=sys.stderr)
        return EXIT_INPUT
    config = TrainConfig.from_file(args.config, _train_overrides(args))
    out = Path(args.out_dir)
    write_manifest(out / "run_manifest.json", args, [args.config, args.train, args.dev, args.pool],
                   config=asdict(config), seed=config.seed)
    train_set = _load(args, args.train)
    dev = _load(args, args.dev) if args.dev else Dataset("dev", [])
    pool = None
    if config.use_hard:
        if not args.pool:
            print(f"error: ablation {config.ablation!r} needs --pool", file=sys.stderr)
            return EXIT_INPUT
        pool = load_pool(args.pool)
    (out / "config.txt").write_text(config.dumps(), encoding="utf-8")
    try:
        result = train(config, SplitSet(train_set, dev, Dataset("test", [])), pool,
                       out_dir=out, log_path=out / "train_log.jsonl")
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    (out / "similarity.json").write_text(
        json.dumps([r.to_json() for r in result.similarity_log], indent=1) + "\n", encoding="utf-8")
    print(f"best epoch {result.best_epoch}; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    test = _load(args, args.test)
    out = Path(args.out)
    write_manifest(out.with_suffix(".manifest.json"), args, [args.test])
    recognizer = _recognizer(args)
    if args.checkpoint is None and not args.oracle_echo:
        print("error: --checkpoint is required", file=sys.stderr)
        return EXIT_INPUT
    try:
        if args.oracle_echo or read_manifest(args.checkpoint).get("backbone") == "oracle-echo":
            summarizer = ReferenceEcho(test)
        else:
            summarizer = load_checkpoint(args.checkpoint)
    except (CheckpointError, RuntimeError, KeyError) as e:
        print(f"error: incompatible checkpoint: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    report = evaluate(summarizer, test, recognizer, strategy=args.strategy, width=args.beam_width)
    report.save(out)
    run_name = args.name or ("oracle-echo" if args.oracle_echo else Path(args.checkpoint).name)
    table = format_table({run_name: [report]})
    out.with_suffix(".txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_report(args) -> int:
    runs: dict[str, list[MetricsReport]] = {}
    for item in args.reports:
        name, _, path = item.rpartition("=")
        report = MetricsReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        runs.setdefault(name or Path(path).stem, []).append(report)
    table = format_table(runs)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n", encoding="utf-8")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _io_flags(p):
    g = p.add_argument_group("input records")
    g.add_argument("--format", choices=["jsonl", "csv", "tsv"], help="input format (default: from file suffix)")
    g.add_argument("--chq-field", default="chq", help="field holding the question")
    g.add_argument("--faq-field", default="faq", help="field holding the reference summary")
    g.add_argument("--id-field", default="id", help="field holding the pair id")


def _ner_flags(p):
    p.add_argument("--lexicon", help="lexicon file, one term per line with optional TAB category (default: bundled)")
    p.add_argument("--ner-command", help="external NER command speaking the NDJSON stdio protocol; "
                                         "falls back to the lexicon if it cannot run")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="medqsum", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dedup", help="remove repeated (question, summary) pairs")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--report", required=True, help="where to write the duplicate report (JSON)")
    p.add_argument("--near", action="store_true", help="word-shingle Jaccard matching instead of exact")
    p.add_argument("--threshold", type=float, default=0.9, help="Jaccard threshold for --near")
    p.add_argument("--fail-if-clean", action="store_true", help="exit 2 when nothing was removed")
    _io_flags(p)
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("split", help="seeded train/dev/test split")
    p.add_argument("input")
    p.add_argument("out_dir")
    p.add_argument("--sizes", type=int, nargs=3, required=True, metavar=("TRAIN", "DEV", "TEST"))
    p.add_argument("--seed", type=int, default=42)
    _io_flags(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("leakage", help="report pairs shared between splits")
    p.add_argument("train")
    p.add_argument("dev")
    p.add_argument("test")
    p.add_argument("--report", help="write the leakage report (JSON) here")
    _io_flags(p)
    p.set_defaults(func=cmd_leakage)

    p = sub.add_parser("negatives", help="build the entity dictionary and hard-negative pool")
    p.add_argument("--train", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--X", type=int, default=128, help="negatives per summary")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--scope", choices=["all", "each"], default="all",
                   help="replace all entities per negative, or one entity at a time")
    _ner_flags(p)
    _io_flags(p)
    p.set_defaults(func=cmd_negatives)

    p = sub.add_parser("train", help="train a summarizer",
                       description="Config file keys (flat 'key = value') and flags share names; flags win.")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--pool", help="hard-negative pool (JSONL) from 'negatives'")
    p.add_argument("--out-dir")
    p.add_argument("--print-defaults", action="store_true", help="print the default configuration and exit")
    g = p.add_argument_group("configuration keys")
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        g.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar="V",
                       type=lambda v, k=f.name: TrainConfig.coerce(k, v),
                       help=f"{KEY_HELP[f.name]} (default: {getattr(defaults, f.name)})")
    _io_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a test set")
    p.add_argument("--checkpoint", help="checkpoint directory written by 'train'")
    p.add_argument("--oracle-echo", action="store_true",
                   help="score the reference summaries themselves (sanity check; all metrics 1.0)")
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="report JSON path; a .txt table is written beside it")
    p.add_argument("--name", help="run name in the table")
    p.add_argument("--strategy", choices=["greedy", "beam"], default="greedy")
    p.add_argument("--beam-width", type=int, default=4)
    _ner_flags(p)
    _io_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tabulate metrics reports side by side")
    p.add_argument("reports", nargs="+", metavar="[RUN=]REPORT.json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def _glue_dash_values(argv: list[str]) -> list[str]:
    # "--ablation -s-h" would otherwise be read as two flags
    out, it = [], iter(argv)
    for a in it:
        if a == "--ablation":
            out.append(f"--ablation={next(it, '')}")
        else:
            out.append(a)
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(_glue_dash_values(argv))
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CorpusError, OSError, RecognizerError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
