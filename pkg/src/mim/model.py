"""Full matching model: encoder -> intents on both sides -> matching head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensors as T
from .encoder import EncodedBatch, EncoderConfig, encode_batch, init_encoder_params
from .errors import ValidationError
from .intents import IntentConfig, IntentSet, distribution_loss, extract_intents, intent_distribution, kl_loss
from .layout import Batch
from .matcher import LossBreakdown, MatchHead, intent_attention, match_logit, match_loss, mask_loss, mask_sweep, total_loss
from .tensors import ParamSet, Tensor

ABLATION_FLAGS = ("no_gate", "no_kl", "no_dis", "no_multi_intent", "no_mask")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    intents: IntentConfig = field(default_factory=IntentConfig)
    ablations: frozenset[str] = frozenset()
    loss_weights: dict[str, float] = field(default_factory=dict)
    # spread beta over surviving slots when an intent is masked
    mask_renormalize: bool = False
    head_init_std: float = 0.01
    # divide the h_cls . I_j scores by sqrt(d); False is the literal form
    scale_intent_attention: bool = True
    # W_A must start far enough from zero that the c intents differ
    intent_init_std: float = 0.1

    def __post_init__(self):
        self.ablations = frozenset(self.ablations)
        unknown = self.ablations - set(ABLATION_FLAGS)
        if unknown:
            raise ValidationError(f"unknown ablation flags: {sorted(unknown)}")
        if "no_gate" in self.ablations and self.encoder.use_gates:
            self.encoder = EncoderConfig(**{**self.encoder.to_dict(), "use_gates": False})

    @property
    def multi_intent(self) -> bool:
        return "no_multi_intent" not in self.ablations

    def disabled_losses(self) -> frozenset[str]:
        off = set()
        if "no_kl" in self.ablations:
            off.add("kl")
        if "no_dis" in self.ablations:
            off.add("dis")
        if "no_mask" in self.ablations:
            off.add("mask")
        if not self.multi_intent:
            off |= {"kl", "dis", "mask"}
        return frozenset(off)


def init_params(config: ModelConfig, seed: int) -> ParamSet:
    rng = np.random.default_rng(seed)
    params = init_encoder_params(config.encoder, rng)
    d, c = config.encoder.d, config.intents.c
    std = config.head_init_std
    if config.multi_intent:
        w_a = rng.standard_normal((2 * d, c)) * config.intent_init_std
        params.add("intent.W_A", w_a.astype(np.float32))
        params.add("intent.b_A", np.zeros(c, dtype=np.float32))
        width = (2 * c + 1) * d
    else:
        width = d
    params.add("head.w", (rng.standard_normal((width, 1)) * std).astype(np.float32))
    params.add("head.b", np.zeros(1, dtype=np.float32))
    return params


@dataclass
class ForwardResult:
    probs: Tensor  # [B]
    losses: LossBreakdown
    encoded: EncodedBatch
    intents_x: IntentSet | None = None
    intents_y: IntentSet | None = None


def forward(
    params: ParamSet,
    config: ModelConfig,
    batch: Batch,
    train: bool = False,
    rng: np.random.Generator | None = None,
    frozen_delta: np.ndarray | None = None,
    pin_gates: bool = False,
) -> ForwardResult:
    """One pass over a batch producing probabilities and every loss term.

    ``frozen_delta`` replaces the mask-sweep target; finite-difference checks
    use it to hold the gradient-stopped target fixed while perturbing inputs.
    """
    enc = encode_batch(batch, params, config.encoder, train=train, rng=rng, pin_gates=pin_gates)
    head = MatchHead(params["head.w"], params["head.b"])
    labels = batch.labels
    disabled = config.disabled_losses()

    if not config.multi_intent:
        logit = match_logit(enc.h_cls, None, None, head)
        probs = T.sigmoid(logit)
        losses = total_loss(match_loss(probs, labels), disabled=disabled, weights=config.loss_weights)
        return ForwardResult(probs, losses, enc)

    ic = config.intents
    W_A, b_A = params["intent.W_A"], params["intent.b_A"]
    ix = extract_intents(enc.h_x, enc.h_a, W_A, b_A, enc.a_mask, side="x")
    iy = extract_intents(enc.h_y, enc.h_b, W_A, b_A, enc.b_mask, side="y")

    dis = None
    if "dis" not in disabled:
        sides = [(ix, enc.h_x, enc.h_a, enc.a_mask), (iy, enc.h_y, enc.h_b, enc.b_mask)]
        terms = []
        for intents, h_text, h_attrs, mask in sides:
            if not ic.dis_encoder_grad:
                h_text = T.stop_gradient(h_text)
                intents = extract_intents(h_text, T.stop_gradient(h_attrs), W_A, b_A, mask, side=intents.side)
            terms.append(distribution_loss(intents, h_text, ic.tau, ic.include_self))
        dis = 0.5 * (terms[0] + terms[1])
    kl = None
    if "kl" not in disabled:
        kl = kl_loss(intent_distribution(ix), intent_distribution(iy), labels, ic.kl_margin, ic.epsilon_dist)

    intents_all = T.concat([ix.intents, iy.intents], axis=1)
    beta = intent_attention(enc.h_cls, intents_all, config.scale_intent_attention)
    logit = match_logit(enc.h_cls, intents_all, beta, head)
    probs = T.sigmoid(logit)
    l_match = match_loss(probs, labels)

    l_mask = None
    delta = None
    if "mask" not in disabled:
        delta = frozen_delta
        if delta is None:
            delta = mask_sweep(
                enc.h_cls.data,
                intents_all.data,
                beta.data,
                head.weight.data,
                head.bias.data,
                labels,
                renormalize=config.mask_renormalize,
            )
        l_mask = mask_loss(delta, beta)

    losses = total_loss(
        l_match, dis, kl, l_mask, disabled=disabled, weights=config.loss_weights,
        beta=beta.data, delta_l=delta,
    )
    return ForwardResult(probs, losses, enc, ix, iy)


def predict(params: ParamSet, config: ModelConfig, batch: Batch) -> np.ndarray:
    """Match probabilities in eval mode, without recording a graph."""
    with T.no_grad():
        return forward(params, config, batch).probs.data.astype(np.float64)
