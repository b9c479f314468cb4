"""Run configuration, read from and written to TOML.

Sections: ``[encoder]``, ``[intents]``, ``[corpus]`` and ``[train]``. Missing
keys take the desk-scale defaults below; unknown keys are rejected.

Paper-scale reference values (not defaults here): batch size 256, truncation
length 128 or 512 tokens, 12 layers with 768 hidden units.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .data import CorpusSpec
from .encoder import EncoderConfig
from .errors import ValidationError
from .intents import IntentConfig
from .model import ABLATION_FLAGS, ModelConfig

__all__ = ["TrainConfig", "RunConfig", "load_config", "dump_config"]


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 20
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_lo: float = -1.0
    clip_hi: float = 1.0
    seed: int = 0
    ablations: list[str] = field(default_factory=list)
    loss_weights: dict[str, float] = field(default_factory=dict)
    mask_renormalize: bool = False
    eval_threshold: float = 0.5
    # stop after this many epochs without a better valid AUC; 0 disables
    patience: int = 0
    # stop once valid AUC reaches this value; 0 disables
    target_auc: float = 0.0
    # keep the best k checkpoints and average their reports
    best_k: int = 1
    # directory holding train/valid/test.jsonl; empty means generate from [corpus]
    data_dir: str = ""
    eval_batch_size: int = 256

    def validate(self) -> None:
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValidationError("batch sizes must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.clip_lo >= self.clip_hi:
            raise ValidationError(f"clip range [{self.clip_lo}, {self.clip_hi}] is empty")
        if self.best_k < 1:
            raise ValidationError("best_k must be >= 1")
        if not 0.0 <= self.eval_threshold <= 1.0:
            raise ValidationError("eval_threshold must lie in [0, 1]")
        unknown = set(self.ablations) - set(ABLATION_FLAGS)
        if unknown:
            raise ValidationError(f"unknown ablation flags {sorted(unknown)}; known: {list(ABLATION_FLAGS)}")

    def check_paths(self) -> None:
        """Referenced inputs must exist before a run starts."""
        if not self.data_dir:
            return
        for split in ("train", "valid", "test"):
            if not (Path(self.data_dir) / f"{split}.jsonl").is_file():
                raise ValidationError(f"data_dir {self.data_dir!r} has no {split}.jsonl")


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    intents: IntentConfig = field(default_factory=IntentConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.train.validate()
        self.corpus.validate()
        if not self.train.data_dir and self.encoder.vocab_size < self.corpus.vocab_size:
            raise ValidationError(
                f"encoder vocab_size {self.encoder.vocab_size} is smaller than corpus vocab_size {self.corpus.vocab_size}"
            )

    def model_config(self, ablations=None, c: int | None = None) -> ModelConfig:
        intents = self.intents if c is None else dataclasses.replace(self.intents, c=c)
        return ModelConfig(
            encoder=dataclasses.replace(self.encoder),
            intents=intents,
            ablations=frozenset(self.train.ablations if ablations is None else ablations),
            loss_weights=dict(self.train.loss_weights),
            mask_renormalize=self.train.mask_renormalize,
        )

    def replace(self, **sections) -> RunConfig:
        """Copy with whole sections swapped, e.g. ``replace(train=...)``."""
        return RunConfig(**{name: sections.get(name, getattr(self, name)) for name in _SECTIONS})

    def with_train(self, **changes) -> RunConfig:
        return self.replace(train=dataclasses.replace(self.train, **changes))

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out


_SECTIONS = {"encoder": EncoderConfig, "intents": IntentConfig, "corpus": CorpusSpec, "train": TrainConfig}


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ValidationError(f"[{section}] must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValidationError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ValidationError(f"[{section}]: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    return RunConfig(**{name: _build(cls, data.get(name, {}), name) for name, cls in _SECTIONS.items()})


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file {str(path)!r} does not exist")
    try:
        data = tomli.loads(path.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    train = data.get("train")
    if isinstance(train, dict) and train.get("data_dir") and not Path(train["data_dir"]).is_absolute():
        # relative data paths resolve against the config file
        train["data_dir"] = str((path.parent / train["data_dir"]).resolve())
    return config_from_dict(data)


def dump_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(tomli_w.dumps(config.to_dict()), encoding="utf-8")
