"""Training loop, evaluation and run artefacts.

A run directory holds ``config.toml``, ``best.ckpt`` (best valid AUC),
``train_log.jsonl`` (one JSON event per line) and ``metrics.csv`` (one row
per epoch). Nothing time-dependent is written to ``metrics.csv``, so a fixed
seed reproduces it byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensors as T
from .config import RunConfig, dump_config
from .data import SPLITS, Vocab, batch_iter, build_vocab, generate_corpus, load_dataset, save_dataset
from .errors import NumericalError, ValidationError
from .matcher import COMPONENTS
from .metrics import MetricsReport, mean_reports
from .model import ModelConfig, forward, init_params
from .records import MatchExample
from .tensors import ParamSet

logger = logging.getLogger(__name__)

__all__ = [
    "TrainResult",
    "load_splits",
    "write_splits",
    "train",
    "evaluate",
    "evaluate_checkpoint",
    "load_params",
]

LOSS_NAMES = COMPONENTS + ("total",)


class EventLog:
    """Line-delimited JSON events."""

    def __init__(self, path: Path):
        self.path = path
        self.path.write_text("", encoding="utf-8")

    def write(self, event: str, **fields) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"event": event, **fields}, sort_keys=True, allow_nan=True) + "\n")


def write_splits(splits: dict[str, list[MatchExample]], out_dir: str | Path, vocab: Vocab) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "vocab.txt").write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")
    for name, examples in splits.items():
        save_dataset(out / f"{name}.jsonl", examples, vocab)


def read_vocab(path: Path) -> Vocab:
    return Vocab([line for line in path.read_text(encoding="utf-8").splitlines() if line])


def load_splits(config: RunConfig) -> dict[str, list[MatchExample]]:
    """Splits from ``train.data_dir`` when set, else generated from ``[corpus]``."""
    if not config.train.data_dir:
        return generate_corpus(config.corpus)
    config.train.check_paths()
    root = Path(config.train.data_dir)
    vocab = read_vocab(root / "vocab.txt") if (root / "vocab.txt").is_file() else build_vocab(config.corpus)
    if len(vocab) > config.encoder.vocab_size:
        raise ValidationError(f"dataset vocabulary ({len(vocab)}) exceeds encoder vocab_size {config.encoder.vocab_size}")
    return {name: load_dataset(root / f"{name}.jsonl", vocab) for name in SPLITS}


def _mean_losses(sums: dict[str, float], count: int) -> dict[str, float]:
    return {k: v / max(count, 1) for k, v in sums.items()}


def evaluate(
    params: ParamSet,
    model_config: ModelConfig,
    examples: list[MatchExample],
    threshold: float = 0.5,
    batch_size: int = 256,
) -> tuple[MetricsReport, np.ndarray]:
    """Eval-mode probabilities and metrics; loss means are example-weighted."""
    if not examples:
        raise ValidationError("cannot evaluate on an empty dataset")
    probs = []
    sums = {k: 0.0 for k in LOSS_NAMES}
    with T.no_grad():
        for batch in batch_iter(examples, batch_size, max_len=model_config.encoder.max_len):
            res = forward(params, model_config, batch)
            probs.append(res.probs.data.astype(np.float64))
            for k, v in res.losses.values().items():
                sums[k] += v * len(batch)
    scores = np.concatenate(probs)
    labels = np.array([e.label for e in examples])
    report = MetricsReport.from_scores(scores, labels, threshold, _mean_losses(sums, len(examples)))
    return report, scores


def load_params(model_config: ModelConfig, checkpoint: str | Path) -> ParamSet:
    params = init_params(model_config, seed=0)
    params.load_arrays(T.load_checkpoint(checkpoint))
    return params


def evaluate_checkpoint(
    config: RunConfig,
    checkpoint: str | Path,
    examples: list[MatchExample],
    threshold: float | None = None,
) -> MetricsReport:
    model_config = config.model_config()
    params = load_params(model_config, checkpoint)
    threshold = config.train.eval_threshold if threshold is None else threshold
    return evaluate(params, model_config, examples, threshold, config.train.eval_batch_size)[0]


@dataclass
class EpochRecord:
    epoch: int
    train_losses: dict[str, float]
    valid: MetricsReport


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path
    params: ParamSet
    model_config: ModelConfig
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_valid: MetricsReport | None = None
    best_checkpoints: list[Path] = field(default_factory=list)
    splits: dict[str, list[MatchExample]] = field(default_factory=dict, repr=False)

    @property
    def loss_curve(self) -> list[float]:
        return [r.train_losses["total"] for r in self.history]

    def test_report(self, config: RunConfig) -> MetricsReport:
        """Test metrics of the best checkpoint, or the mean over the best k."""
        reports = [evaluate_checkpoint(config, path, self.splits["test"]) for path in self.best_checkpoints]
        return reports[0] if len(reports) == 1 else mean_reports(reports)


def _dump_batch(path: Path, batch, losses: dict[str, float], step: int) -> None:
    record = {
        "step": step,
        "losses": losses,
        "token_ids": batch.token_ids.tolist(),
        "labels": batch.labels.tolist(),
        "examples": [e.meta for e in batch.examples or []],
    }
    path.write_text(json.dumps(record, allow_nan=True), encoding="utf-8")


def _metrics_row(epoch: int, losses: dict[str, float], valid: MetricsReport) -> dict:
    row = {"epoch": epoch}
    row.update({f"train_{k}": repr(float(losses.get(k, math.nan))) for k in LOSS_NAMES})
    row.update({"valid_accuracy": repr(valid.accuracy), "valid_auc": repr(valid.auc), "valid_f1": repr(valid.f1)})
    return row


def train(
    config: RunConfig,
    out_dir: str | Path,
    splits: dict[str, list[MatchExample]] | None = None,
) -> TrainResult:
    """Train with Adam and gradient clipping, keeping the best valid-AUC checkpoint.

    ``epochs = 0`` writes the initial parameters as the checkpoint. A
    non-finite loss aborts with :class:`NumericalError` after dumping the
    offending batch to ``nan_batch.json``.
    """
    config.validate()
    tc = config.train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = splits if splits is not None else load_splits(config)
    for name in ("train", "valid"):
        if not splits.get(name):
            raise ValidationError(f"{name} split is empty")
    model_config = config.model_config()
    max_id = max(max(max(e.x.tokens), max(e.y.tokens)) for e in splits["train"])
    if max_id >= model_config.encoder.vocab_size:
        raise ValidationError(f"token id {max_id} is outside the encoder vocabulary ({model_config.encoder.vocab_size})")

    dump_config(config, out / "config.toml")
    log = EventLog(out / "train_log.jsonl")
    params = init_params(model_config, tc.seed)
    drop_rng = np.random.default_rng(tc.seed + 1)
    log.write("start", seed=tc.seed, parameters=params.num_parameters(), ablations=sorted(model_config.ablations),
              n_train=len(splits["train"]), n_valid=len(splits["valid"]))

    def valid_report() -> MetricsReport:
        return evaluate(params, model_config, splits["valid"], tc.eval_threshold, tc.eval_batch_size)[0]

    best = valid_report()
    best_epoch = 0
    ranked: list[tuple[float, int, Path]] = []  # (auc, epoch, path), best first

    def keep(epoch: int, report: MetricsReport) -> None:
        path = out / f"epoch{epoch:03d}.ckpt"
        T.save_checkpoint(path, params)
        score = report.auc if report.auc_defined else -math.inf
        ranked.append((score, epoch, path))
        # ties keep the earlier epoch
        ranked.sort(key=lambda item: (-item[0], item[1]))
        for _, _, stale in ranked[tc.best_k:]:
            stale.unlink(missing_ok=True)
        del ranked[tc.best_k:]

    keep(0, best)
    history: list[EpochRecord] = []
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(_metrics_row(0, {}, best)))
        writer.writeheader()
        writer.writerow(_metrics_row(0, {}, best))
        stale_epochs = 0
        step = 0
        for epoch in range(1, tc.epochs + 1):
            started = time.perf_counter()
            sums = {k: 0.0 for k in LOSS_NAMES}
            seen = 0
            for batch in batch_iter(splits["train"], tc.batch_size, shuffle_seed=tc.seed * 100_003 + epoch,
                                    max_len=model_config.encoder.max_len):
                params.zero_grad()
                res = forward(params, model_config, batch, train=True, rng=drop_rng)
                values = res.losses.values()
                if not all(math.isfinite(v) for v in values.values()):
                    _dump_batch(out / "nan_batch.json", batch, values, step)
                    log.write("nan_abort", epoch=epoch, step=step, losses=values)
                    raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}: {values}")
                T.backward(res.losses.total)
                T.clip_gradients(params, tc.clip_lo, tc.clip_hi)
                T.adam_step(params, tc.lr, tc.beta1, tc.beta2, tc.adam_eps)
                for k, v in values.items():
                    sums[k] += v * len(batch)
                seen += len(batch)
                step += 1
            losses = _mean_losses(sums, seen)
            report = valid_report()
            history.append(EpochRecord(epoch, losses, report))
            writer.writerow(_metrics_row(epoch, losses, report))
            fh.flush()
            log.write("epoch", epoch=epoch, train=losses, valid=report.to_dict(),
                      seconds=round(time.perf_counter() - started, 3))
            logger.info("epoch %d loss %.4f valid %s", epoch, losses["total"], report.summary())
            if report.auc_defined and (not best.auc_defined or report.auc > best.auc):
                best, best_epoch, stale_epochs = report, epoch, 0
            else:
                stale_epochs += 1
            if len(ranked) < tc.best_k or (report.auc_defined and report.auc > ranked[-1][0]):
                keep(epoch, report)
            if tc.target_auc and report.auc_defined and report.auc >= tc.target_auc:
                log.write("target_reached", epoch=epoch, auc=report.auc)
                break
            if tc.patience and stale_epochs >= tc.patience:
                log.write("early_stop", epoch=epoch, best_epoch=best_epoch)
                break

    checkpoint = out / "best.ckpt"
    shutil.copyfile(ranked[0][2], checkpoint)
    log.write("done", best_epoch=best_epoch, best_valid=best.to_dict())
    params.load_arrays(T.load_checkpoint(checkpoint))
    return TrainResult(
        out_dir=out,
        checkpoint=checkpoint,
        params=params,
        model_config=model_config,
        history=history,
        best_epoch=best_epoch,
        best_valid=best,
        best_checkpoints=[path for _, _, path in ranked],
        splits=splits,
    )
