"""Hand-built probes and reference computations shared by unit and acceptance tests."""

from __future__ import annotations

import math

import numpy as np

from mim import tensors as T
from mim.encoder import EncoderConfig, encode_batch, init_encoder_params
from mim.intents import distribution_loss, extract_intents
from mim.layout import collate
from mim.matcher import intent_attention, mask_loss, mask_sweep
from mim.records import AttributedText
from mim.tensors import ParamSet, Tensor


def pairwise_distance(intents: np.ndarray) -> float:
    """Mean Euclidean distance between distinct intent pairs of one row."""
    c = intents.shape[0]
    dists = [np.linalg.norm(intents[i] - intents[j]) for i in range(c) for j in range(i + 1, c)]
    return float(np.mean(dists))


def collapsed_intent_run(seed: int, steps: int = 50, c: int = 3, n: int = 5, d: int = 8, tau: float = 1.0,
                         lr: float = 0.01, spread: float = 1e-3) -> tuple[float, float]:
    """Optimise only the distribution loss from a near-collapsed intent projection.

    ``W_A`` starts at ``spread`` scale, so every intent is close to the plain
    attribute mean. Returns the mean pairwise intent distance before and after.
    """
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        h_text = Tensor(rng.standard_normal(d))
        h_attrs = Tensor(rng.standard_normal((n, d)))
        W_A = Tensor(rng.standard_normal((2 * d, c)) * spread, requires_grad=True)
        b_A = Tensor(np.zeros(c), requires_grad=True)
        params = ParamSet({"W_A": W_A, "b_A": b_A})

        def intents():
            return extract_intents(h_text, h_attrs, W_A, b_A)

        before = pairwise_distance(intents().intents.data)
        for _ in range(steps):
            params.zero_grad()
            T.backward(distribution_loss(intents(), h_text, tau))
            T.adam_step(params, lr=lr)
        after = pairwise_distance(intents().intents.data)
    return before, after


def decisive_mask_run(seed: int, steps: int = 50, c: int = 2, d: int = 8, decisive: int | None = None,
                      lr: float = 0.01, head_scale: float = 4.0, bias: float = -2.0,
                      query_scale: float = 0.1) -> list[float]:
    """Optimise only the mask loss on a head that reads a single intent slot.

    The head weights are zero except on slot ``decisive``, which is aligned
    with that intent, and the negative bias means only that slot can make
    the positive pair look positive. Blanking it is therefore the only mask
    that raises the match loss. ``h_cls`` starts small, so beta starts near
    uniform, and is the free parameter driving beta.
    Returns the decisive beta after every step, starting with the initial one.
    """
    rng = np.random.default_rng(seed)
    n = 2 * c
    j = int(rng.integers(n)) if decisive is None else decisive
    intents = rng.standard_normal((n, d))
    weight = np.zeros(((n + 1) * d, 1))
    weight[(j + 1) * d:(j + 2) * d, 0] = head_scale * intents[j] / np.linalg.norm(intents[j])
    bias = np.array([bias])
    with T.default_dtype(np.float64):
        h_cls = Tensor(rng.standard_normal(d) * query_scale, requires_grad=True)
        params = ParamSet({"h_cls": h_cls})
        I = Tensor(intents)
        trace = []
        for step in range(steps + 1):
            beta = intent_attention(h_cls, I, scale=True)
            trace.append(float(beta.data[j]))
            if step == steps:
                break
            delta = mask_sweep(h_cls.data, intents, beta.data, weight, bias, 1.0)
            params.zero_grad()
            T.backward(mask_loss(delta, beta))
            T.adam_step(params, lr=lr)
    return trace


def decisive_delta(seed: int, c: int = 2, d: int = 8) -> tuple[int, np.ndarray]:
    """Mask-sweep losses of the decisive construction at its initial point."""
    rng = np.random.default_rng(seed)
    n = 2 * c
    j = int(rng.integers(n))
    intents = rng.standard_normal((n, d))
    weight = np.zeros(((n + 1) * d, 1))
    weight[(j + 1) * d:(j + 2) * d, 0] = 4.0 * intents[j] / np.linalg.norm(intents[j])
    h_cls = rng.standard_normal(d) * 0.1
    scores = intents @ h_cls / np.sqrt(d)
    beta = np.exp(scores - scores.max())
    beta /= beta.sum()
    return j, mask_sweep(h_cls, intents, beta, weight, np.array([-2.0]), 1.0)


def _layer_norm(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def reference_encoder(plan, params, cfg):
    """Plain post-LN transformer over one unpadded layout, numpy only."""
    p = {k: v.data.astype(np.float64) for k, v in params.items()}
    ids, segs = np.array(plan.token_ids), np.array(plan.segment_ids)
    x = p["enc.tok_emb"][ids] + p["enc.seg_emb"][segs] + p["enc.pos_emb"][np.arange(len(ids))]
    x = _layer_norm(x, p["enc.emb_ln_g"], p["enc.emb_ln_b"], cfg.ln_eps)
    H, dh = cfg.heads, cfg.d_head
    for layer in range(cfg.layers):
        w = {k[len(f"enc.l{layer}."):]: v for k, v in p.items() if k.startswith(f"enc.l{layer}.")}
        heads = []
        for h in range(H):
            cols = slice(h * dh, (h + 1) * dh)
            q = (x @ w["w_q"] + w["b_q"])[:, cols]
            k = (x @ w["w_k"] + w["b_k"])[:, cols]
            v = (x @ w["w_v"] + w["b_v"])[:, cols]
            s = q @ k.T / math.sqrt(dh)
            a = np.exp(s - s.max(1, keepdims=True))
            heads.append(a / a.sum(1, keepdims=True) @ v)
        x = _layer_norm(x + np.concatenate(heads, 1) @ w["w_o"] + w["b_o"], w["ln1_g"], w["ln1_b"], cfg.ln_eps)
        ffn = _gelu(x @ w["w_1"] + w["b_1"]) @ w["w_2"] + w["b_2"]
        x = _layer_norm(x + ffn, w["ln2_g"], w["ln2_b"], cfg.ln_eps)
    return x


def pinned_gate_max_diff(seed: int) -> float:
    """Max abs difference between the gated encoder with gates pinned to 1 and the reference."""
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(vocab_size=40, d=16, heads=4, layers=2, ffn_dim=32, max_len=48, init_std=0.3)
    with T.default_dtype(np.float64):
        params = init_encoder_params(cfg, rng)
        for t in params.values():
            t.data = t.data.astype(np.float64)
        pairs = [
            (AttributedText((5, 6, 7), (("entity", (20, 21)), ("location", (22,)))),
             AttributedText((8, 9), (("category", (23, 24, 25)),))),
            (AttributedText((10,)), AttributedText((11, 12, 13, 14), (("entity", (26,)),))),
        ]
        batch = collate(pairs)
        enc = encode_batch(batch, params, cfg, pin_gates=True)
    worst = 0.0
    for b, plan in enumerate(batch.plans):
        ref = reference_encoder(plan, params, cfg)
        worst = max(worst, float(np.abs(enc.token_states.data[b, : plan.length] - ref).max()))
    return worst
