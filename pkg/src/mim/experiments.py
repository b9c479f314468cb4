"""Ablation table, intent-count sweep and per-attribute-type removal."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ValidationError
from .metrics import MetricsReport
from .model import ABLATION_FLAGS, init_params
from .records import MatchExample
from .train import evaluate, load_splits, train

logger = logging.getLogger(__name__)

__all__ = ["ROW_NAMES", "SeedRow", "ablate", "sweep_intents", "remove_attribute_types", "write_rows"]

# display names in the order of the classic ablation table
ROW_NAMES = {
    None: "MIM",
    "no_gate": "w/o gate score",
    "no_kl": "w/o L_KL",
    "no_dis": "w/o L_dis",
    "no_multi_intent": "w/o multi-intent",
    "no_mask": "w/o mask task",
}


@dataclass
class SeedRow:
    """Mean test metrics of one variant over several seeds."""

    name: str
    flag: str
    c: int
    n_parameters: int
    accuracy: float
    auc: float
    f1: float
    auc_std: float
    seeds: list[int] = field(default_factory=list)
    per_seed_auc: list[float] = field(default_factory=list)
    best_epochs: list[int] = field(default_factory=list)

    def csv_row(self) -> dict:
        row = dataclasses.asdict(self)
        for key in ("seeds", "per_seed_auc", "best_epochs"):
            row[key] = " ".join(repr(v) for v in row[key])
        for key in ("accuracy", "auc", "f1", "auc_std"):
            row[key] = repr(row[key])
        return row


def _run_seeds(config: RunConfig, splits, seeds, out_dir: Path, name: str, flag: str) -> SeedRow:
    reports: list[MetricsReport] = []
    best_epochs = []
    for seed in seeds:
        run_cfg = config.with_train(seed=int(seed))
        result = train(run_cfg, out_dir / f"seed{seed}", splits)
        report = result.test_report(run_cfg)
        logger.info("%s seed %d: %s", name, seed, report.summary())
        reports.append(report)
        best_epochs.append(result.best_epoch)
    mc = config.model_config()
    aucs = [r.auc for r in reports]
    return SeedRow(
        name=name,
        flag=flag,
        c=config.intents.c,
        n_parameters=init_params(mc, 0).num_parameters(),
        accuracy=float(np.mean([r.accuracy for r in reports])),
        auc=float(np.mean(aucs)),
        f1=float(np.mean([r.f1 for r in reports])),
        auc_std=float(np.std(aucs)),
        seeds=[int(s) for s in seeds],
        per_seed_auc=[float(a) for a in aucs],
        best_epochs=best_epochs,
    )


def write_rows(rows: list[SeedRow], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].csv_row()) if rows else ["name"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row.csv_row())


def _splits(config: RunConfig, splits):
    return splits if splits is not None else load_splits(config)


def ablate(
    config: RunConfig,
    flags,
    out_dir: str | Path,
    seeds=(0,),
    splits: dict[str, list[MatchExample]] | None = None,
) -> list[SeedRow]:
    """Full model plus one run set per flag, each flag switching off one mechanism.

    All variants share the corpus and the seed list. Rows are written to
    ``ablation.csv`` in the order of the ablation table.
    """
    flags = list(flags)
    unknown = set(flags) - set(ABLATION_FLAGS)
    if unknown:
        raise ValidationError(f"unknown ablation flags {sorted(unknown)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = _splits(config, splits)
    rows = []
    for flag in [None] + [f for f in ABLATION_FLAGS if f in flags]:
        variant = config.with_train(ablations=[] if flag is None else [flag])
        name = ROW_NAMES[flag]
        rows.append(_run_seeds(variant, splits, seeds, out / (flag or "full"), name, flag or ""))
    write_rows(rows, out / "ablation.csv")
    return rows


def sweep_intents(
    config: RunConfig,
    c_values,
    out_dir: str | Path,
    seeds=(0,),
    splits: dict[str, list[MatchExample]] | None = None,
) -> list[SeedRow]:
    """Train the full model once per intent count ``c`` with shared seeds.

    Writes ``sweep.csv`` with columns ``c, accuracy, auc, f1`` (seed means)
    and ``sweep_detail.csv`` with per-seed values.
    """
    c_values = [int(c) for c in c_values]
    if not c_values:
        raise ValidationError("c_values must not be empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = _splits(config, splits)
    rows = []
    for c in c_values:
        variant = config.replace(intents=dataclasses.replace(config.intents, c=c))
        rows.append(_run_seeds(variant, splits, seeds, out / f"c{c}", f"c={c}", ",".join(config.train.ablations)))
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["c", "accuracy", "auc", "f1"])
        for row in rows:
            writer.writerow([row.c, repr(row.accuracy), repr(row.auc), repr(row.f1)])
    write_rows(rows, out / "sweep_detail.csv")
    return rows


def remove_attribute_types(config: RunConfig, params, examples: list[MatchExample]) -> dict[str, MetricsReport]:
    """Test metrics with every attribute of one type dropped from both sides."""
    mc = config.model_config()
    tc = config.train
    types = sorted({kind for e in examples for kind, _ in e.x.attributes + e.y.attributes})
    out = {"none": evaluate(params, mc, examples, tc.eval_threshold, tc.eval_batch_size)[0]}
    for kind in types:
        stripped = [dataclasses.replace(e, x=e.x.without_type(kind), y=e.y.without_type(kind)) for e in examples]
        out[kind] = evaluate(params, mc, stripped, tc.eval_threshold, tc.eval_batch_size)[0]
    return out

