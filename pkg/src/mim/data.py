"""Synthetic attributed-matching corpora, dataset files, vocabulary and batching.

Each latent intent owns a disjoint block of content tokens. A side samples a
few intents, writes a short text mixing their tokens with shared noise, and
emits one typed attribute per sampled intent. A pair is positive when the two
sides share at least ``overlap_threshold`` latent intents.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from collections.abc import Iterator, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .layout import Batch, collate_examples
from .records import RESERVED, UNK_ID, AttributedText, MatchExample

logger = logging.getLogger(__name__)

__all__ = [
    "CorpusSpec",
    "Vocab",
    "build_vocab",
    "generate_corpus",
    "save_dataset",
    "load_dataset",
    "batch_iter",
    "oracle_predict",
    "oracle_scores",
    "pair_key",
]

SPLITS = ("train", "valid", "test")


@dataclass
class CorpusSpec:
    vocab_size: int = 128
    num_latent_intents: int = 8
    intents_min: int = 3
    intents_max: int = 3
    tokens_per_intent: int = 8
    attr_types: tuple[str, ...] = ("entity", "location", "category")
    attribute_noise: float = 0.15
    overlap_threshold: int = 2
    text_len: int = 4
    attr_len: int = 3
    # chance that a text token comes from a sampled intent rather than the noise pool
    text_signal: float = 0.5
    num_train: int = 5000
    num_valid: int = 500
    num_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.attr_types = tuple(self.attr_types)
        self.validate()

    @property
    def content_start(self) -> int:
        return len(RESERVED)

    @property
    def noise_start(self) -> int:
        return self.content_start + self.num_latent_intents * self.tokens_per_intent

    @property
    def noise_size(self) -> int:
        return self.vocab_size - self.noise_start

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.num_train, "valid": self.num_valid, "test": self.num_test}

    def validate(self) -> None:
        K = self.num_latent_intents
        if K < 1 or self.tokens_per_intent < 1:
            raise ValidationError("num_latent_intents and tokens_per_intent must be positive")
        if not 1 <= self.intents_min <= self.intents_max:
            raise ValidationError(f"need 1 <= intents_min <= intents_max, got [{self.intents_min}, {self.intents_max}]")
        if K < self.intents_max:
            raise ValidationError(f"num_latent_intents={K} is smaller than intents_max={self.intents_max}")
        if not 1 <= self.overlap_threshold <= self.intents_min:
            raise ValidationError(
                f"overlap_threshold must lie in [1, intents_min={self.intents_min}], got {self.overlap_threshold}"
            )
        if self.noise_size < 1:
            raise ValidationError(
                f"vocab_size={self.vocab_size} leaves no noise pool after {len(RESERVED)} reserved ids "
                f"and {K}x{self.tokens_per_intent} intent tokens"
            )
        if not self.attr_types:
            raise ValidationError("attr_types must name at least one attribute type")
        if not 0.0 <= self.attribute_noise <= 1.0 or not 0.0 <= self.text_signal <= 1.0:
            raise ValidationError("attribute_noise and text_signal must be probabilities")
        if self.text_len < 1 or self.attr_len < 1:
            raise ValidationError("text_len and attr_len must be positive")
        if min(self.num_train, self.num_valid, self.num_test) < 0:
            raise ValidationError("split sizes must be non-negative")

    def intent_block(self, intent: int) -> range:
        start = self.content_start + intent * self.tokens_per_intent
        return range(start, start + self.tokens_per_intent)

    def intent_of(self, token: int) -> int | None:
        """Latent intent owning ``token``, or None for reserved and noise ids."""
        if self.content_start <= token < self.noise_start:
            return (token - self.content_start) // self.tokens_per_intent
        return None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["attr_types"] = list(self.attr_types)
        return out


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise ValidationError(f"vocabulary must start with {RESERVED}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValidationError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int | None:
        return self.index.get(token)

    def to_strings(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def build_vocab(spec: CorpusSpec) -> Vocab:
    """Reserved ids 0-3, then ``i<k>_<t>`` per intent block, then ``n<t>`` noise tokens."""
    tokens = list(RESERVED)
    for k in range(spec.num_latent_intents):
        tokens.extend(f"i{k}_{t}" for t in range(spec.tokens_per_intent))
    tokens.extend(f"n{t}" for t in range(spec.noise_size))
    return Vocab(tokens)


def pair_key(example: MatchExample) -> tuple:
    """Token content of a pair, used for the cross-split leakage check."""
    return (example.x.tokens, example.x.attributes, example.y.tokens, example.y.attributes)


class _Generator:
    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.content = np.arange(spec.content_start, spec.vocab_size)

    def side(self, intents: Sequence[int]) -> AttributedText:
        spec, rng = self.spec, self.rng
        text = []
        for _ in range(spec.text_len):
            if rng.random() < spec.text_signal:
                block = spec.intent_block(int(rng.choice(intents)))
                text.append(int(rng.choice(block)))
            else:
                text.append(spec.noise_start + int(rng.integers(spec.noise_size)))
        attrs = []
        for slot, intent in enumerate(intents):
            block = spec.intent_block(intent)
            toks = [int(t) for t in rng.choice(block, size=spec.attr_len)]
            for i in range(len(toks)):
                if rng.random() < spec.attribute_noise:
                    toks[i] = int(rng.choice(self.content))
            attrs.append((spec.attr_types[slot % len(spec.attr_types)], tuple(toks)))
        return AttributedText(tuple(text), tuple(attrs))

    def _overlap_range(self, rx: int, ry: int, label: int) -> range:
        spec = self.spec
        lo = max(0, rx + ry - spec.num_latent_intents)
        hi = min(rx, ry)
        if label:
            return range(max(lo, spec.overlap_threshold), hi + 1)
        return range(lo, min(hi, spec.overlap_threshold - 1) + 1)

    def latent_pair(self, label: int) -> tuple[list[int], list[int], int]:
        spec, rng = self.spec, self.rng
        sizes = range(spec.intents_min, spec.intents_max + 1)
        feasible = [
            (rx, ry) for rx in sizes for ry in sizes if len(self._overlap_range(rx, ry, label))
        ]
        if not feasible:
            # e.g. every pair is forced to overlap: all examples take the other label
            label = 1 - label
            feasible = [(rx, ry) for rx in sizes for ry in sizes if len(self._overlap_range(rx, ry, label))]
        rx, ry = feasible[int(rng.integers(len(feasible)))]
        shared_n = int(rng.choice(self._overlap_range(rx, ry, label)))
        order = [int(i) for i in rng.permutation(spec.num_latent_intents)]
        x = order[:rx]
        shared = [int(i) for i in rng.choice(x, size=shared_n, replace=False)]
        rest = order[rx:]
        y = shared + rest[: ry - shared_n]
        y = [y[i] for i in rng.permutation(len(y))]
        return x, y, label

    def example(self, label: int, split: str, index: int) -> MatchExample:
        lx, ly, label = self.latent_pair(label)
        return MatchExample(
            x=self.side(lx),
            y=self.side(ly),
            label=label,
            latent_x=tuple(lx),
            latent_y=tuple(ly),
            meta={"split": split, "index": index},
        )


def generate_corpus(spec: CorpusSpec, max_attempts: int = 100) -> dict[str, list[MatchExample]]:
    """Generate train/valid/test splits with exact label balance per split.

    Pairs whose token content already appeared anywhere in the corpus are
    redrawn, so no (x, y) pair is shared between splits.
    """
    spec.validate()
    gen = _Generator(spec)
    seen: set[tuple] = set()
    splits: dict[str, list[MatchExample]] = {}
    for split in SPLITS:
        n = spec.split_sizes()[split]
        labels = np.arange(n) % 2
        gen.rng.shuffle(labels)
        examples = []
        for i, label in enumerate(labels):
            for _ in range(max_attempts):
                ex = gen.example(int(label), split, i)
                key = pair_key(ex)
                if key not in seen:
                    break
            else:
                raise ValidationError(
                    f"could not draw a fresh pair after {max_attempts} attempts; the spec admits too few distinct pairs"
                )
            seen.add(key)
            examples.append(ex)
        splits[split] = examples
    return splits


# dataset files


def _encode_tokens(ids: Sequence[int], vocab: Vocab | None) -> list:
    return list(ids) if vocab is None else vocab.to_strings(ids)


def _example_record(ex: MatchExample, vocab: Vocab | None) -> dict:
    def attrs(text: AttributedText):
        return [{"type": kind, "tokens": _encode_tokens(toks, vocab)} for kind, toks in text.attributes]

    meta = dict(ex.meta)
    meta["latent_x"] = list(ex.latent_x)
    meta["latent_y"] = list(ex.latent_y)
    return {
        "x_tokens": _encode_tokens(ex.x.tokens, vocab),
        "x_attrs": attrs(ex.x),
        "y_tokens": _encode_tokens(ex.y.tokens, vocab),
        "y_attrs": attrs(ex.y),
        "label": ex.label,
        "meta": meta,
    }


def save_dataset(path: str | Path, examples: Sequence[MatchExample], vocab: Vocab | None = None) -> None:
    """Write one JSON object per line; tokens are strings when ``vocab`` is given."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(_example_record(ex, vocab), separators=(",", ":")))
            fh.write("\n")


class _Decoder:
    def __init__(self, vocab: Vocab | None, lineno: int, unknown: Counter):
        self.vocab, self.lineno, self.unknown = vocab, lineno, unknown

    def fail(self, name: str, why: str):
        raise ValidationError(f"line {self.lineno}: field {name!r} {why}")

    def tokens(self, value, name: str) -> tuple[int, ...]:
        if not isinstance(value, list) or not value:
            self.fail(name, "must be a non-empty list of tokens")
        out = []
        for tok in value:
            if isinstance(tok, bool):
                self.fail(name, f"has non-token entry {tok!r}")
            if isinstance(tok, int):
                if tok < 0 or (self.vocab is not None and tok >= len(self.vocab)):
                    self.fail(name, f"has out-of-range id {tok}")
                out.append(tok)
            elif isinstance(tok, str):
                idx = self.vocab.id_of(tok) if self.vocab is not None else None
                if idx is None:
                    if self.vocab is None:
                        self.fail(name, f"holds string token {tok!r} but no vocabulary was given")
                    self.unknown[tok] += 1
                    idx = UNK_ID
                out.append(idx)
            else:
                self.fail(name, f"has non-token entry {tok!r}")
        return tuple(out)

    def attrs(self, value, name: str):
        if not isinstance(value, list):
            self.fail(name, "must be a list")
        out = []
        for k, item in enumerate(value):
            if not isinstance(item, dict) or not isinstance(item.get("type"), str):
                self.fail(f"{name}[{k}].type", "must be a string")
            out.append((item["type"], self.tokens(item.get("tokens"), f"{name}[{k}].tokens")))
        return tuple(out)


def load_dataset(path: str | Path, vocab: Vocab | None = None, report: dict | None = None) -> list[MatchExample]:
    """Read a file written by :func:`save_dataset`.

    Unknown string tokens map to [UNK]; their counts go to ``report`` (under
    ``"unknown_tokens"``) and to a warning. Malformed lines raise
    :class:`ValidationError` naming the line and field.
    """
    unknown: Counter = Counter()
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            dec = _Decoder(vocab, lineno, unknown)
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                dec.fail("<record>", "must be a JSON object")
            for name in ("x_tokens", "x_attrs", "y_tokens", "y_attrs", "label"):
                if name not in rec:
                    dec.fail(name, "is missing")
            label = rec["label"]
            if isinstance(label, bool) or label not in (0, 1):
                dec.fail("label", f"must be 0 or 1, got {label!r}")
            meta = rec.get("meta", {})
            if not isinstance(meta, dict):
                dec.fail("meta", "must be an object")
            meta = dict(meta)
            x = AttributedText(dec.tokens(rec["x_tokens"], "x_tokens"), dec.attrs(rec["x_attrs"], "x_attrs"))
            y = AttributedText(dec.tokens(rec["y_tokens"], "y_tokens"), dec.attrs(rec["y_attrs"], "y_attrs"))
            examples.append(
                MatchExample(
                    x=x,
                    y=y,
                    label=label,
                    latent_x=tuple(meta.pop("latent_x", ())),
                    latent_y=tuple(meta.pop("latent_y", ())),
                    meta=meta,
                )
            )
    total = sum(unknown.values())
    if total:
        logger.warning("%s: %d unknown tokens mapped to [UNK] (%d distinct)", path, total, len(unknown))
    if report is not None:
        report["unknown_tokens"] = total
        report["unknown_distinct"] = dict(unknown)
    return examples


# batching


def batch_iter(
    examples: Sequence[MatchExample],
    batch_size: int,
    shuffle_seed: int | None = None,
    max_len: int | None = None,
) -> Iterator[Batch]:
    """Yield every example exactly once, padded per batch with [PAD]."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(examples))
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start : start + batch_size]]
        yield collate_examples(chunk, max_len=max_len)


# rule-based oracle


def _attribute_intents(text: AttributedText, spec: CorpusSpec) -> set[int]:
    """Majority intent per attribute; ties go to the lowest id."""
    found = set()
    for _, toks in text.attributes:
        votes = Counter(i for i in (spec.intent_of(t) for t in toks) if i is not None)
        if votes:
            best = max(votes.values())
            found.add(min(i for i, v in votes.items() if v == best))
    return found


def oracle_scores(examples: Sequence[MatchExample], spec: CorpusSpec) -> np.ndarray:
    """Recovered-intent overlap per pair, read off attribute tokens only."""
    return np.array(
        [len(_attribute_intents(e.x, spec) & _attribute_intents(e.y, spec)) for e in examples], dtype=np.float64
    )


def oracle_predict(examples: Sequence[MatchExample], spec: CorpusSpec) -> np.ndarray:
    """Apply the overlap rule to the intents recovered from attribute tokens."""
    return (oracle_scores(examples, spec) >= spec.overlap_threshold).astype(np.int64)
