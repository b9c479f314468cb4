"""Token layout of a matching pair and padding of layouts into batches.

A pair is laid out as::

    [CLS] [SEP] x_1..x_m [SEP] a_1 .. [SEP] a_nA [SEP] y_1..y_n [SEP] b_1 .. [SEP] b_nB

so each side is contiguous and every text/attribute block starts with its own
[SEP]. Attribute [SEP] states later serve as attribute representations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from collections.abc import Sequence

import numpy as np

from .errors import ValidationError
from .records import CLS_ID, PAD_ID, SEP_ID, AttributedText, MatchExample


class Segment(IntEnum):
    CLS = 0
    SEP = 1
    X_TEXT = 2
    X_ATTR = 3
    Y_TEXT = 4
    Y_ATTR = 5


@dataclass(frozen=True)
class AttrSpan:
    side: str  # "x" or "y"
    kind: str
    sep_position: int
    start: int
    end: int  # exclusive


@dataclass
class LayoutPlan:
    token_ids: list[int]
    segment_ids: list[int]
    attr_index: list[int]  # per token: attribute number (x attrs first), -1 if none
    attr_spans: list[AttrSpan]
    x_sep: int
    y_sep: int
    n_a: int
    n_b: int
    truncated: int = 0

    @property
    def length(self) -> int:
        return len(self.token_ids)


def layout_length(x: AttributedText, y: AttributedText) -> int:
    """1 + (2 + nA + nB) + m + sum(l_a) + n + sum(l_b)."""
    specials = 1 + 2 + x.n_attrs + y.n_attrs
    attr_tokens = sum(len(t) for _, t in x.attributes) + sum(len(t) for _, t in y.attributes)
    return specials + len(x.tokens) + len(y.tokens) + attr_tokens


def build_layout(x: AttributedText, y: AttributedText, max_len: int | None = None) -> LayoutPlan:
    """Lay out a pair; on overflow trim Y text, then X text, never attributes."""
    x_tokens, y_tokens = list(x.tokens), list(y.tokens)
    truncated = 0
    if max_len is not None:
        excess = layout_length(x, y) - max_len
        if excess > 0:
            cut = min(excess, len(y_tokens) - 1)
            y_tokens = y_tokens[: len(y_tokens) - cut]
            excess -= cut
            truncated += cut
            cut = min(excess, len(x_tokens) - 1)
            x_tokens = x_tokens[: len(x_tokens) - cut]
            excess -= cut
            truncated += cut
            if excess > 0:
                raise ValidationError(
                    f"pair needs {layout_length(x, y)} positions but max_len is {max_len}; "
                    "attributes alone do not fit"
                )

    ids = [CLS_ID]
    segs = [Segment.CLS]
    attr_index = [-1]
    spans: list[AttrSpan] = []

    def text_block(tokens, seg):
        sep = len(ids)
        ids.append(SEP_ID)
        segs.append(Segment.SEP)
        attr_index.append(-1)
        ids.extend(tokens)
        segs.extend([seg] * len(tokens))
        attr_index.extend([-1] * len(tokens))
        return sep

    def attr_blocks(side, attributes, seg, offset):
        for k, (kind, tokens) in enumerate(attributes):
            sep = len(ids)
            ids.append(SEP_ID)
            segs.append(Segment.SEP)
            attr_index.append(-1)
            ids.extend(tokens)
            segs.extend([seg] * len(tokens))
            attr_index.extend([offset + k] * len(tokens))
            spans.append(AttrSpan(side, kind, sep, sep + 1, sep + 1 + len(tokens)))

    x_sep = text_block(x_tokens, Segment.X_TEXT)
    attr_blocks("x", x.attributes, Segment.X_ATTR, 0)
    y_sep = text_block(y_tokens, Segment.Y_TEXT)
    attr_blocks("y", y.attributes, Segment.Y_ATTR, x.n_attrs)
    return LayoutPlan(
        token_ids=ids,
        segment_ids=[int(s) for s in segs],
        attr_index=attr_index,
        attr_spans=spans,
        x_sep=x_sep,
        y_sep=y_sep,
        n_a=x.n_attrs,
        n_b=y.n_attrs,
        truncated=truncated,
    )


@dataclass
class Batch:
    """Padded arrays for a list of pairs.

    ``gate_index`` points into a per-example gate table laid out as
    ``[x-attribute gates (n_a_max) | y-attribute gates (n_b_max) | 1.0]``;
    tokens outside attributes point at the trailing constant 1.
    """

    token_ids: np.ndarray  # [B, L]
    segment_ids: np.ndarray  # [B, L]
    positions: np.ndarray  # [B, L]
    pad_mask: np.ndarray  # [B, L] True on real tokens
    gate_index: np.ndarray  # [B, L]
    a_sep: np.ndarray  # [B, NA]
    a_mask: np.ndarray  # [B, NA]
    b_sep: np.ndarray  # [B, NB]
    b_mask: np.ndarray  # [B, NB]
    x_sep: np.ndarray  # [B]
    y_sep: np.ndarray  # [B]
    labels: np.ndarray  # [B]
    plans: list[LayoutPlan] = field(repr=False)
    examples: list[MatchExample] | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    @property
    def n_a_max(self) -> int:
        return self.a_sep.shape[1]

    @property
    def n_b_max(self) -> int:
        return self.b_sep.shape[1]


def collate(
    pairs: Sequence[tuple[AttributedText, AttributedText]],
    labels: Sequence[int] | None = None,
    max_len: int | None = None,
    examples: list[MatchExample] | None = None,
) -> Batch:
    plans = [build_layout(x, y, max_len) for x, y in pairs]
    bsz = len(plans)
    L = max(p.length for p in plans)
    na = max(p.n_a for p in plans)
    nb = max(p.n_b for p in plans)
    token_ids = np.full((bsz, L), PAD_ID, dtype=np.int64)
    segment_ids = np.zeros((bsz, L), dtype=np.int64)
    pad_mask = np.zeros((bsz, L), dtype=bool)
    gate_index = np.full((bsz, L), na + nb, dtype=np.int64)
    a_sep = np.zeros((bsz, na), dtype=np.int64)
    a_mask = np.zeros((bsz, na), dtype=bool)
    b_sep = np.zeros((bsz, nb), dtype=np.int64)
    b_mask = np.zeros((bsz, nb), dtype=bool)
    for i, p in enumerate(plans):
        n = p.length
        token_ids[i, :n] = p.token_ids
        segment_ids[i, :n] = p.segment_ids
        pad_mask[i, :n] = True
        ai = np.asarray(p.attr_index)
        gi = np.where(ai < 0, na + nb, np.where(ai < p.n_a, ai, ai - p.n_a + na))
        gate_index[i, :n] = gi
        x_spans = [s for s in p.attr_spans if s.side == "x"]
        y_spans = [s for s in p.attr_spans if s.side == "y"]
        a_sep[i, : len(x_spans)] = [s.sep_position for s in x_spans]
        a_mask[i, : len(x_spans)] = True
        b_sep[i, : len(y_spans)] = [s.sep_position for s in y_spans]
        b_mask[i, : len(y_spans)] = True
    positions = np.broadcast_to(np.arange(L), (bsz, L)).copy()
    return Batch(
        token_ids=token_ids,
        segment_ids=segment_ids,
        positions=positions,
        pad_mask=pad_mask,
        gate_index=gate_index,
        a_sep=a_sep,
        a_mask=a_mask,
        b_sep=b_sep,
        b_mask=b_mask,
        x_sep=np.array([p.x_sep for p in plans], dtype=np.int64),
        y_sep=np.array([p.y_sep for p in plans], dtype=np.int64),
        labels=np.asarray(labels if labels is not None else np.zeros(bsz), dtype=np.float64),
        plans=plans,
        examples=examples,
    )


def collate_examples(examples: Sequence[MatchExample], max_len: int | None = None) -> Batch:
    return collate(
        [(e.x, e.y) for e in examples],
        [e.label for e in examples],
        max_len=max_len,
        examples=list(examples),
    )
