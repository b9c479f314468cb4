"""Attribute-aware cross encoder.

The pair layout (see :mod:`mim.layout`) runs through a post-LN transformer
stack. Attention logits towards the words of attribute ``k`` are multiplied
by a gate ``g_k = sigmoid(FC(h_sep_k))`` computed from that attribute's
[SEP] state before the softmax, so a low gate flattens the attention the
attribute receives. Non-attribute tokens always carry gate 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensors as T
from .errors import ContractError, ValidationError
from .layout import Batch, LayoutPlan, Segment, build_layout, collate
from .records import AttributedText
from .tensors import ParamSet, Tensor

__all__ = [
    "EncoderConfig",
    "EncodedBatch",
    "EncodedPair",
    "LayoutPlan",
    "build_layout",
    "init_encoder_params",
    "attribute_gates",
    "gated_attention",
    "encode_batch",
    "encode",
]

N_SEGMENTS = len(Segment)


@dataclass
class EncoderConfig:
    vocab_size: int = 128
    d: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    max_len: int = 128
    dropout_rate: float = 0.0
    # scale logits by 1/sqrt(d_head) before gating; False is the literal Q_i x K_j
    scale_logits: bool = True
    # recompute gates from each block's input; False computes them once from the embeddings
    gate_per_layer: bool = True
    use_gates: bool = True
    use_positions: bool = True
    init_std: float = 0.1
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d % self.heads:
            raise ValidationError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0 <= self.dropout_rate < 1:
            raise ValidationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        for name in ("vocab_size", "d", "layers", "heads", "ffn_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator, params: ParamSet | None = None,
                        prefix: str = "enc.") -> ParamSet:
    """Gaussian-initialised encoder weights; layer-norm gains start at 1."""
    params = params if params is not None else ParamSet()
    d, std = config.d, config.init_std

    def normal(*shape):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float32)

    def ones(*shape):
        return np.ones(shape, dtype=np.float32)

    params.add(prefix + "tok_emb", normal(config.vocab_size, d))
    params.add(prefix + "seg_emb", normal(N_SEGMENTS, d))
    if config.use_positions:
        params.add(prefix + "pos_emb", normal(config.max_len, d))
    params.add(prefix + "emb_ln_g", ones(d))
    params.add(prefix + "emb_ln_b", zeros(d))
    for layer in range(config.layers):
        p = f"{prefix}l{layer}."
        if config.use_gates and (config.gate_per_layer or layer == 0):
            params.add(p + "gate_w", normal(d, 1))
            params.add(p + "gate_b", zeros(1))
        for proj in ("q", "k", "v"):
            params.add(p + f"w_{proj}", normal(d, d))
            params.add(p + f"b_{proj}", zeros(d))
        params.add(p + "w_o", normal(d, d))
        params.add(p + "b_o", zeros(d))
        params.add(p + "ln1_g", ones(d))
        params.add(p + "ln1_b", zeros(d))
        params.add(p + "w_1", normal(d, config.ffn_dim))
        params.add(p + "b_1", zeros(config.ffn_dim))
        params.add(p + "w_2", normal(config.ffn_dim, d))
        params.add(p + "b_2", zeros(d))
        params.add(p + "ln2_g", ones(d))
        params.add(p + "ln2_b", zeros(d))
    return params


def attribute_gates(sep_states: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """One gate in (0, 1) per attribute [SEP] state: ``sigmoid(sep @ w + b)``."""
    logits = T.linear(sep_states, weight, bias)
    return T.reshape(T.sigmoid(logits), sep_states.shape[:-1])


def gated_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    token_gates: Tensor | None = None,
    pad_mask: np.ndarray | None = None,
    scale: bool = True,
    return_weights: bool = False,
):
    """Scaled dot-product attention with per-key gates on the logits.

    ``alpha[i, j] = softmax_j(g_j * q_i . k_j)`` over unmasked keys, output
    row ``i`` is ``sum_j alpha[i, j] v_j``. ``q, k, v`` are ``[..., L, d_h]``;
    ``token_gates`` and ``pad_mask`` are ``[..., L]`` over keys, where their
    leading dims may be 1 in place of the head axis.
    """
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ContractError(f"gated_attention: q {q.shape}, k {k.shape}, v {v.shape} disagree")
    L = q.shape[-2]
    logits = T.matmul(q, T.transpose(k, _swap_last(k.ndim)))
    if scale:
        logits = logits * (1.0 / np.sqrt(q.shape[-1]))
    if token_gates is not None:
        gate_rows = T.reshape(token_gates, token_gates.shape[:-1] + (1, L))
        logits = logits * T.expand(gate_rows, logits.shape)
    mask = None
    if pad_mask is not None:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        mask = np.broadcast_to(pad_mask.reshape(pad_mask.shape[:-1] + (1, L)), logits.shape)
    weights = T.softmax(logits, axis=-1, mask=mask)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


@dataclass
class EncodedBatch:
    token_states: Tensor  # [B, L, d]
    h_cls: Tensor  # [B, d]
    h_x: Tensor  # [B, d]
    h_y: Tensor  # [B, d]
    h_a: Tensor  # [B, NA, d]
    h_b: Tensor  # [B, NB, d]
    a_mask: np.ndarray
    b_mask: np.ndarray
    gates: Tensor | None  # [B, NA + NB] from the last block
    attention: list[np.ndarray] = field(default_factory=list)  # per layer [B, H, L, L]


@dataclass
class EncodedPair:
    token_states: Tensor
    h_cls: Tensor
    h_X: Tensor
    h_Y: Tensor
    h_A: Tensor
    h_B: Tensor
    gates: Tensor | None
    plan: LayoutPlan


def _gates_for_layer(x: Tensor, batch: Batch, params: ParamSet, prefix: str) -> Tensor:
    sep_idx = np.concatenate([batch.a_sep, batch.b_sep], axis=1)
    sep_states = T.gather(x, sep_idx)
    return attribute_gates(sep_states, params[prefix + "gate_w"], params[prefix + "gate_b"])


def _token_gates(gates: Tensor, batch: Batch) -> Tensor:
    ones = Tensor(np.ones((len(batch), 1), dtype=gates.dtype))
    table = T.concat([gates, ones], axis=1)
    return T.gather(table, batch.gate_index)


def encode_batch(
    batch: Batch,
    params: ParamSet,
    config: EncoderConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
    pin_gates: bool = False,
    record_attention: bool = False,
    prefix: str = "enc.",
) -> EncodedBatch:
    """Run the encoder on a padded batch.

    ``pin_gates`` forces every gate to exactly 1 while keeping the gated code
    path; with it the stack must reduce to ordinary attention.
    """
    if batch.token_ids.shape[1] > config.max_len:
        raise ValidationError(f"batch length {batch.token_ids.shape[1]} exceeds max_len {config.max_len}")
    drop_rng = rng if train and config.dropout_rate > 0 else None
    B, L = batch.token_ids.shape
    H, dh, d = config.heads, config.d_head, config.d

    x = params[prefix + "tok_emb"][batch.token_ids] + params[prefix + "seg_emb"][batch.segment_ids]
    if config.use_positions:
        x = x + params[prefix + "pos_emb"][batch.positions]
    x = T.layer_norm(x, params[prefix + "emb_ln_g"], params[prefix + "emb_ln_b"], config.ln_eps)
    x = T.dropout(x, config.dropout_rate, drop_rng)

    key_mask = batch.pad_mask.reshape(B, 1, L)
    gates = None
    attention = []
    for layer in range(config.layers):
        p = f"{prefix}l{layer}."
        token_gates = None
        if config.use_gates:
            if config.gate_per_layer or layer == 0:
                gates = _gates_for_layer(x, batch, params, p)
            if pin_gates:
                token_gates = Tensor(np.ones((B, L), dtype=x.dtype))
            else:
                token_gates = _token_gates(gates, batch)
            token_gates = T.reshape(token_gates, (B, 1, L))

        q, k, v = (
            T.transpose(T.reshape(T.linear(x, params[p + f"w_{n}"], params[p + f"b_{n}"]), (B, L, H, dh)),
                        (0, 2, 1, 3))
            for n in "qkv"
        )
        ctx, weights = gated_attention(q, k, v, token_gates, key_mask, config.scale_logits, return_weights=True)
        if record_attention:
            attention.append(weights.data.copy())
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, d))
        attn_out = T.dropout(T.linear(ctx, params[p + "w_o"], params[p + "b_o"]), config.dropout_rate, drop_rng)
        x = T.layer_norm(x + attn_out, params[p + "ln1_g"], params[p + "ln1_b"], config.ln_eps)
        hidden = T.gelu(T.linear(x, params[p + "w_1"], params[p + "b_1"]))
        ffn_out = T.dropout(T.linear(hidden, params[p + "w_2"], params[p + "b_2"]), config.dropout_rate, drop_rng)
        x = T.layer_norm(x + ffn_out, params[p + "ln2_g"], params[p + "ln2_b"], config.ln_eps)

    return EncodedBatch(
        token_states=x,
        h_cls=x[:, 0, :],
        h_x=T.reshape(T.gather(x, batch.x_sep[:, None]), (B, d)),
        h_y=T.reshape(T.gather(x, batch.y_sep[:, None]), (B, d)),
        h_a=T.gather(x, batch.a_sep),
        h_b=T.gather(x, batch.b_sep),
        a_mask=batch.a_mask,
        b_mask=batch.b_mask,
        gates=gates,
        attention=attention,
    )


def encode(x: AttributedText, y: AttributedText, params: ParamSet, config: EncoderConfig,
           **kwargs) -> EncodedPair:
    """Encode one pair and return unbatched slices of the last layer."""
    plan = build_layout(x, y, config.max_len)
    batch = collate([(x, y)], max_len=config.max_len)
    enc = encode_batch(batch, params, config, **kwargs)
    return EncodedPair(
        token_states=enc.token_states[0],
        h_cls=enc.h_cls[0],
        h_X=enc.h_x[0],
        h_Y=enc.h_y[0],
        h_A=enc.h_a[0],
        h_B=enc.h_b[0],
        gates=None if enc.gates is None else enc.gates[0],
        plan=plan,
    )
