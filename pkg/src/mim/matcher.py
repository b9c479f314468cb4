"""Intent-aware matching head, the intent-mask task and loss assembly."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensors as T
from .errors import ContractError
from .tensors import Tensor

__all__ = [
    "MatchHead",
    "LossBreakdown",
    "intent_attention",
    "head_features",
    "match_logit",
    "match_probability",
    "match_loss",
    "match_loss_np",
    "mask_sweep",
    "mask_loss",
    "total_loss",
    "COMPONENTS",
]

COMPONENTS = ("match", "dis", "kl", "mask")
PROB_EPS = 1e-7


@dataclass
class MatchHead:
    """Linear map from ``[h_cls; beta_1 I_1; ...; beta_2c I_2c]`` to one logit."""

    weight: Tensor  # [(2c+1) d, 1]
    bias: Tensor  # [1]

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]


def intent_attention(h_cls: Tensor, intents_all: Tensor, scale: bool = False) -> Tensor:
    """``beta_j = softmax_j(h_cls . I_j)`` over the ``2c`` stacked intents.

    ``scale`` divides the scores by ``sqrt(d)``, as in scaled dot-product
    attention.
    """
    d = h_cls.shape[-1]
    lead = h_cls.shape[:-1]
    if intents_all.shape[:-2] != lead or intents_all.shape[-1] != d:
        raise ContractError(f"intents {intents_all.shape} do not match h_cls {h_cls.shape}")
    scores = T.reshape(T.matmul(intents_all, T.reshape(h_cls, lead + (d, 1))), intents_all.shape[:-1])
    if scale:
        scores = scores * (1.0 / np.sqrt(d))
    return T.softmax(scores, axis=-1)


def head_features(h_cls: Tensor, intents_all: Tensor, beta: Tensor) -> Tensor:
    n, d = intents_all.shape[-2:]
    lead = h_cls.shape[:-1]
    scaled = intents_all * T.expand(T.reshape(beta, lead + (n, 1)), intents_all.shape)
    return T.concat([h_cls, T.reshape(scaled, lead + (n * d,))], axis=-1)


def match_logit(h_cls: Tensor, intents_all: Tensor | None, beta: Tensor | None, head: MatchHead) -> Tensor:
    feats = h_cls if intents_all is None else head_features(h_cls, intents_all, beta)
    if feats.shape[-1] != head.in_features:
        raise ContractError(f"head expects width {head.in_features}, features have {feats.shape[-1]}")
    out = T.linear(feats, head.weight, head.bias)
    return T.reshape(out, out.shape[:-1])


def match_probability(h_cls: Tensor, intents_all: Tensor | None, beta: Tensor | None,
                      head: MatchHead) -> Tensor:
    """``P = sigmoid(FC([h_cls; beta_1 I_1; ...]))``, strictly inside (0, 1)."""
    return T.sigmoid(match_logit(h_cls, intents_all, beta, head))


def match_loss(p: Tensor, s, reduce: bool = True) -> Tensor:
    """Binary cross-entropy with ``p`` clamped to ``[1e-7, 1 - 1e-7]``."""
    s = np.broadcast_to(np.asarray(s, dtype=p.dtype), p.shape)
    pc = T.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    per = -(Tensor(s) * T.log(pc) + Tensor(1.0 - s) * T.log(1.0 - pc))
    return T.mean(per) if reduce and per.ndim else per


def match_loss_np(p: np.ndarray, s) -> np.ndarray:
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return -(s * np.log(pc) + (1.0 - s) * np.log(1.0 - pc))


def mask_sweep(
    h_cls: np.ndarray,
    intents_all: np.ndarray,
    beta: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    s,
    baseline: np.ndarray | None = None,
    renormalize: bool = False,
) -> np.ndarray:
    """Loss increase ``L_new,j - L_match`` from blanking each intent slot in turn.

    Works on plain arrays (no graph). Slot ``j`` contributes zero in its
    masked pass; ``beta`` is left as is unless ``renormalize`` spreads the
    removed mass over the surviving slots.
    """
    h_cls, intents_all, beta = (np.asarray(a) for a in (h_cls, intents_all, beta))
    n, d = intents_all.shape[-2:]
    lead = h_cls.shape[:-1]
    w_cls, w_slots = weight[:d, 0], weight[d:, 0].reshape(n, d)
    slot_scores = np.einsum("...jd,jd->...j", intents_all, w_slots)  # [..., 2c]
    base_logit = h_cls @ w_cls + bias[0]
    full = base_logit + np.sum(beta * slot_scores, axis=-1)
    s = np.broadcast_to(np.asarray(s, dtype=h_cls.dtype), lead)
    if baseline is None:
        baseline = match_loss_np(_sigmoid(full), s)
    delta = np.empty(lead + (n,), dtype=np.float64)
    for j in range(n):
        if renormalize:
            kept = beta.copy()
            kept[..., j] = 0.0
            kept = kept / np.maximum(kept.sum(axis=-1, keepdims=True), 1e-12)
            logit_j = base_logit + np.sum(kept * slot_scores, axis=-1)
        else:
            logit_j = full - beta[..., j] * slot_scores[..., j]
        delta[..., j] = match_loss_np(_sigmoid(logit_j), s) - baseline
    return delta


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def mask_loss(delta_l, beta: Tensor) -> Tensor:
    """``|| softmax(delta_l) - beta ||_2`` per row, averaged over rows.

    ``delta_l`` is treated as a constant target, so only ``beta`` receives
    gradient.
    """
    delta = delta_l.data if isinstance(delta_l, Tensor) else np.asarray(delta_l)
    z = delta - delta.max(axis=-1, keepdims=True)
    target = np.exp(z)
    target = (target / target.sum(axis=-1, keepdims=True)).astype(beta.dtype)
    dist = T.l2_norm(Tensor(target) - beta, axis=-1)
    return T.mean(dist) if dist.ndim else dist


@dataclass
class LossBreakdown:
    match: Tensor
    dis: Tensor
    kl: Tensor
    mask: Tensor
    total: Tensor
    beta: np.ndarray | None = None
    delta_l: np.ndarray | None = None
    weights: dict[str, float] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name).item() for name in COMPONENTS + ("total",)}


def total_loss(
    match: Tensor,
    dis: Tensor | float = 0.0,
    kl: Tensor | float = 0.0,
    mask: Tensor | float = 0.0,
    disabled: frozenset[str] | set[str] = frozenset(),
    weights: dict[str, float] | None = None,
    beta: np.ndarray | None = None,
    delta_l: np.ndarray | None = None,
) -> LossBreakdown:
    """Unweighted sum of the four components by default.

    Components named in ``disabled`` are reported as zero and left out of the
    graph, so they contribute neither value nor gradient.
    """
    weights = {name: 1.0 for name in COMPONENTS} | dict(weights or {})
    parts = {"match": match, "dis": dis, "kl": kl, "mask": mask}
    dtype = match.dtype if isinstance(match, Tensor) else np.float32
    total = None
    shown = {}
    for name in COMPONENTS:
        value = parts[name]
        if name in disabled or value is None:
            shown[name] = Tensor(np.zeros((), dtype=dtype))
            continue
        value = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=dtype))
        shown[name] = value
        term = value if weights[name] == 1.0 else value * weights[name]
        total = term if total is None else total + term
    if total is None:
        total = Tensor(np.zeros((), dtype=dtype))
    return LossBreakdown(total=total, beta=beta, delta_l=delta_l, weights=weights, **shown)
