"""Command-line interface.

Subcommands: gen-data, train, eval, ablate, sweep-intents, grad-check. Each
reads ``--config`` (TOML), accepts ``--seed`` and writes under ``--out``.
Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .data import SPLITS, build_vocab, generate_corpus, oracle_predict, oracle_scores
from .errors import MIMError, NumericalError
from .experiments import ablate, sweep_intents
from .gradcheck import GradCheckReport, check_model, check_ops, desk_model_config
from .metrics import MetricsReport
from .model import ABLATION_FLAGS
from .train import evaluate_checkpoint, load_splits, train, write_splits

logger = logging.getLogger("mim")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _flag_list(text: str) -> list[str]:
    flags = [v.strip() for v in text.split(",") if v.strip()]
    unknown = set(flags) - set(ABLATION_FLAGS)
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown flags {sorted(unknown)}; choose from {', '.join(ABLATION_FLAGS)}")
    return flags


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mim", description="Multi-intent attribute-aware matching on synthetic corpora.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the seed from the config")
        return p

    command("gen-data", "generate a synthetic corpus (seed overrides [corpus] seed)")

    p = command("train", "train one model (seed overrides [train] seed)")
    p.add_argument("--data", default=None, help="dataset directory from gen-data (overrides train.data_dir)")

    p = command("eval", "evaluate a checkpoint")
    p.add_argument("--checkpoint", default=None, help="checkpoint file (default: <out>/best.ckpt)")
    p.add_argument("--data", default=None, help="dataset directory (overrides train.data_dir)")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--threshold", type=float, default=None)

    for name, help_text in (("ablate", "ablation table over seeds"), ("sweep-intents", "intent-count sweep over seeds")):
        p = command(name, help_text)
        p.add_argument("--data", default=None, help="dataset directory (overrides train.data_dir)")
        p.add_argument("--seeds", type=_int_list, default=None, help="comma-separated seeds (default: 5 from --seed)")
        p.add_argument("--n-seeds", type=int, default=5)
        if name == "ablate":
            p.add_argument("--flags", type=_flag_list, default=list(ABLATION_FLAGS),
                           help="comma-separated ablation flags (default: all)")
        else:
            p.add_argument("--c-values", type=_int_list, default=[1, 2, 3, 4, 5, 6])

    p = command("grad-check", "finite-difference check of ops and loss components")
    p.add_argument("--trials", type=int, default=50, help="random instances per op")
    return parser


def _config(args) -> RunConfig:
    config = load_config(args.config)
    data = getattr(args, "data", None)
    if data:
        config = config.with_train(data_dir=str(Path(data).resolve()))
    return config


def _seeds(args, config: RunConfig) -> list[int]:
    if args.seeds:
        return args.seeds
    base = config.train.seed if args.seed is None else args.seed
    return list(range(base, base + args.n_seeds))


def _write_report(path: Path, report: MetricsReport, **extra) -> None:
    row = {**extra, "n_examples": report.n_examples, "accuracy": repr(report.accuracy),
           "auc": repr(report.auc), "f1": repr(report.f1)}
    row.update({f"loss_{k}": repr(v) for k, v in report.losses.items()})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)


def cmd_gen_data(args, out: Path) -> int:
    config = load_config(args.config)
    spec = config.corpus if args.seed is None else dataclasses.replace(config.corpus, seed=args.seed)
    splits = generate_corpus(spec)
    write_splits(splits, out, build_vocab(spec))
    lines = []
    for name, examples in splits.items():
        if not examples:
            continue
        labels = np.array([e.label for e in examples])
        oracle = MetricsReport.from_scores(oracle_scores(examples, spec), labels, spec.overlap_threshold - 0.5)
        acc = float(np.mean(oracle_predict(examples, spec) == labels))
        lines.append(f"{name}: n={len(examples)} positive_rate={labels.mean():.4f} "
                     f"oracle_accuracy={acc:.4f} oracle_auc={oracle.auc:.4f}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


def cmd_train(args, out: Path) -> int:
    config = _config(args)
    if args.seed is not None:
        config = config.with_train(seed=args.seed)
    result = train(config, out)
    report = result.test_report(config)
    _write_report(out / "test_metrics.csv", report, split="test", best_epoch=result.best_epoch)
    summary = f"best epoch {result.best_epoch}: valid {result.best_valid.summary()}\ntest {report.summary()}\n"
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return EXIT_OK


def cmd_eval(args, out: Path) -> int:
    config = _config(args)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out / "best.ckpt"
    if not checkpoint.is_file():
        raise UsageError(f"checkpoint {checkpoint} does not exist")
    examples = load_splits(config)[args.split]
    report = evaluate_checkpoint(config, checkpoint, examples, args.threshold)
    out.mkdir(parents=True, exist_ok=True)
    _write_report(out / f"eval_{args.split}.csv", report, split=args.split, checkpoint=str(checkpoint))
    print(f"{args.split} {report.summary()}")
    return EXIT_OK


def cmd_ablate(args, out: Path) -> int:
    config = _config(args)
    rows = ablate(config, args.flags, out, seeds=_seeds(args, config))
    print(f"{'variant':20s} {'params':>8s} {'accuracy':>9s} {'auc':>7s} {'f1':>7s}")
    for row in rows:
        print(f"{row.name:20s} {row.n_parameters:8d} {row.accuracy:9.4f} {row.auc:7.4f} {row.f1:7.4f}")
    return EXIT_OK


def cmd_sweep(args, out: Path) -> int:
    config = _config(args)
    rows = sweep_intents(config, args.c_values, out, seeds=_seeds(args, config))
    print("c,accuracy,auc,f1")
    for row in rows:
        print(f"{row.c},{row.accuracy:.4f},{row.auc:.4f},{row.f1:.4f}")
    return EXIT_OK


def cmd_grad_check(args, out: Path) -> int:
    config = load_config(args.config)
    seed = config.train.seed if args.seed is None else args.seed
    model_config = desk_model_config()
    model_config.intents = dataclasses.replace(config.intents, c=2)
    model_config.encoder = dataclasses.replace(
        model_config.encoder, scale_logits=config.encoder.scale_logits, gate_per_layer=config.encoder.gate_per_layer
    )
    report = GradCheckReport(ops=check_ops(args.trials, seed), components=check_model(model_config, seed))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "gradcheck.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "name", "max_rel_err", "tolerance"])
        for name, err in report.ops.items():
            writer.writerow(["op", name, repr(err), report.op_tolerance])
        for name, err in report.components.items():
            writer.writerow(["loss", name, repr(err), report.component_tolerance])
    print("\n".join(report.lines()))
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_NUMERICAL


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-intents": cmd_sweep,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, out)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (MIMError, UsageError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
