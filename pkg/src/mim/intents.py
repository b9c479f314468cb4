"""Multi-intent extraction and the two intent regularisers.

Intents are attribute aggregations conditioned on the text state: for each
attribute ``j`` the pair ``[h_text; h_attr_j]`` is projected to ``c`` logits,
a softmax over attributes gives ``c`` convex weightings, and intent ``r`` is
the ``r``-th weighting applied to the attribute states.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensors as T
from .errors import ValidationError
from .tensors import Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "IntentConfig",
    "IntentSet",
    "extract_intents",
    "distribution_loss",
    "intent_distribution",
    "kl_loss",
]


@dataclass
class IntentConfig:
    c: int = 3
    tau: float = 1.0
    kl_margin: float = 1.0
    epsilon_dist: float = 1e-8
    # count the j == i pair in the distribution-loss denominator
    include_self: bool = False
    # let the distribution loss reach the encoder; False trains only the intent projection with it
    dis_encoder_grad: bool = False

    def __post_init__(self):
        if self.c < 1:
            raise ValidationError(f"intent count c must be >= 1, got {self.c}")
        if self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if self.kl_margin <= 0:
            raise ValidationError(f"kl_margin must be positive, got {self.kl_margin}")


@dataclass
class IntentSet:
    intents: Tensor  # [..., c, d]
    aggregation_weights: Tensor  # [..., c, n]
    side: str
    degenerate: np.ndarray  # [...] True where the side had no attributes

    @property
    def c(self) -> int:
        return self.intents.shape[-2]


def extract_intents(
    h_text: Tensor,
    h_attrs: Tensor,
    W_A: Tensor,
    b_A: Tensor,
    attr_mask: np.ndarray | None = None,
    side: str = "x",
) -> IntentSet:
    """Aggregate ``n`` attribute states into ``c`` intents.

    Shapes: ``h_text [..., d]``, ``h_attrs [..., n, d]``, ``W_A [2d, c]``,
    ``b_A [c]``. Rows without any (unmasked) attribute fall back to ``c``
    copies of ``h_text`` and are flagged in ``degenerate``.
    """
    d = h_text.shape[-1]
    lead = h_text.shape[:-1]
    n = h_attrs.shape[-2]
    if h_attrs.shape[:-2] != lead or h_attrs.shape[-1] != d:
        raise ValidationError(f"h_attrs {h_attrs.shape} does not match h_text {h_text.shape}")
    if W_A.shape[0] != 2 * d:
        raise ValidationError(f"W_A must have {2 * d} rows, got {W_A.shape}")
    mask = np.ones(lead + (n,), dtype=bool) if attr_mask is None else np.asarray(attr_mask, dtype=bool)
    empty = ~mask.any(axis=-1)

    # an extra candidate row holding h_text, live only where there are no attributes
    text_row = T.reshape(h_text, lead + (1, d))
    candidates = T.concat([h_attrs, text_row], axis=-2)
    cand_mask = np.concatenate([mask, empty[..., None]], axis=-1)
    pairs = T.concat([T.expand(text_row, lead + (n + 1, d)), candidates], axis=-1)
    logits = T.linear(pairs, W_A, b_A)  # [..., n+1, c]
    weights = T.softmax(logits, axis=-2, mask=cand_mask[..., None])
    weights_t = T.transpose(weights, tuple(range(len(lead))) + (len(lead) + 1, len(lead)))
    intents = T.matmul(weights_t, candidates)
    if np.any(empty):
        logger.debug("%d rows without %s-side attributes use text fallback intents", int(empty.sum()), side)
    return IntentSet(
        intents=intents,
        aggregation_weights=weights_t[..., :n],
        side=side,
        degenerate=empty,
    )


def distribution_loss(
    intents: IntentSet | Tensor,
    h_text: Tensor,
    tau: float,
    include_self: bool = False,
    valid: np.ndarray | None = None,
) -> Tensor:
    """Pull intents towards the text state while pushing them apart.

    Per intent ``i``: ``-(cos(I_i, h)/tau - log sum_{j != i} exp(cos(I_i, I_j)/tau))``,
    averaged over intents and then over the rows flagged in ``valid``.
    With a single intent only the attraction term is left.
    """
    if isinstance(intents, IntentSet):
        if valid is None:
            valid = ~intents.degenerate
        intents = intents.intents
    c, d = intents.shape[-2:]
    lead = intents.shape[:-2]
    unit_i = T.normalize(intents)
    unit_h = T.reshape(T.normalize(h_text), lead + (d, 1))
    attract = T.reshape(T.matmul(unit_i, unit_h), lead + (c,)) * (1.0 / tau)
    if c == 1 and not include_self:
        logger.debug("distribution loss with c=1 has no repulsion term")
        terms = -attract
    else:
        sims = T.matmul(unit_i, T.transpose(unit_i, tuple(range(len(lead))) + (len(lead) + 1, len(lead))))
        pair_mask = np.ones((c, c), dtype=bool) if include_self else ~np.eye(c, dtype=bool)
        lse = T.logsumexp(sims * (1.0 / tau), axis=-1, mask=np.broadcast_to(pair_mask, sims.shape))
        terms = lse - attract
    per_row = T.mean(terms, axis=-1)
    if not lead:
        return per_row
    valid = np.ones(lead, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        return Tensor(np.zeros((), dtype=intents.dtype))
    weights = Tensor((valid / valid.sum()).astype(intents.dtype))
    return T.sum(per_row * weights)


def intent_distribution(intents: IntentSet | Tensor) -> Tensor:
    """Row-wise softmax over the hidden dimension of each intent."""
    if isinstance(intents, IntentSet):
        intents = intents.intents
    return T.softmax(intents, axis=-1)


def kl_loss(p: Tensor, q: Tensor, label, margin: float = 1.0, floor: float = 1e-8) -> Tensor:
    """``KL(p || q)`` averaged over intent rows, hinged for negatives.

    Positives (label 1) minimise the divergence; negatives (label 0) pay
    ``max(0, margin - KL)``. ``p`` and ``q`` are ``[..., c, d]`` row-stochastic;
    ``label`` is a scalar or an array over the leading dims. The result is
    the batch mean.
    """
    if p.shape != q.shape:
        raise ValidationError(f"kl_loss: p {p.shape} and q {q.shape} differ")
    log_ratio = T.log(T.clamp(p, floor, None)) - T.log(T.clamp(q, floor, None))
    kl = T.mean(T.sum(p * log_ratio, axis=-1), axis=-1)  # [...]
    label = np.broadcast_to(np.asarray(label, dtype=p.dtype), kl.shape)
    pos = Tensor(label.astype(p.dtype))
    neg = Tensor((1.0 - label).astype(p.dtype))
    per_row = pos * kl + neg * T.relu(margin - kl)
    return T.mean(per_row) if per_row.ndim else per_row
