"""Finite-difference verification of the analytic gradients.

Two suites run in float64: randomised checks of the individual tensor ops,
and checks of every loss component of a small full model with respect to
all of its parameters. The mask target is held fixed during the model
checks, matching the stop-gradient it carries in training, while the
distribution loss is always checked end to end.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensors as T
from .data import CorpusSpec, generate_corpus
from .encoder import EncoderConfig
from .intents import IntentConfig
from .layout import collate_examples
from .matcher import COMPONENTS
from .model import ModelConfig, forward, init_params
from .tensors import Tensor

__all__ = ["OP_CASES", "check_ops", "check_model", "GradCheckReport", "run_suite", "desk_model_config"]


def _away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    """Nudge entries lying within ``margin`` of a kink."""
    for p in points:
        near = np.abs(x - p) < margin
        x = np.where(near, p + np.sign(x - p + 1e-300) * margin * 2, x)
    return x


def _shape(rng: np.random.Generator, ndim: int = 2) -> tuple[int, ...]:
    return tuple(int(n) for n in rng.integers(1, 5, size=ndim))


# Each case draws inputs and returns (function of one tensor, the tensor).
# The function contracts its output with fixed random weights so every
# output entry contributes to the checked scalar.


def _case_unary(op, low=-2.0, high=2.0, kinks=()):
    def make(rng):
        x = rng.uniform(low, high, size=_shape(rng, int(rng.integers(1, 4))))
        x = _away_from(x, kinks, 1e-3)
        w = Tensor(rng.standard_normal(x.shape))
        return (lambda t: T.sum(op(t) * w)), x

    return make


def _case_binary(op, positive_b=False):
    def make(rng):
        shape = _shape(rng, int(rng.integers(1, 4)))
        b = rng.uniform(0.5, 2.0, size=shape) if positive_b else rng.standard_normal(shape)
        other = Tensor(b)
        w = Tensor(rng.standard_normal(shape))
        return (lambda t: T.sum(op(t, other) * w)), rng.standard_normal(shape)

    return make


def _case_binary_right(op):
    def make(rng):
        shape = _shape(rng, int(rng.integers(1, 4)))
        a = Tensor(rng.standard_normal(shape))
        w = Tensor(rng.standard_normal(shape))
        return (lambda t: T.sum(op(a, t) * w)), rng.uniform(0.5, 2.0, size=shape)

    return make


def _case_matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    lead = _shape(rng, int(rng.integers(0, 2)))
    other = Tensor(rng.standard_normal(lead + (k, n)))
    w = Tensor(rng.standard_normal(lead + (m, n)))
    return (lambda t: T.sum(T.matmul(t, other) * w)), rng.standard_normal(lead + (m, k))


def _case_linear(rng):
    n_in, n_out = (int(v) for v in rng.integers(1, 5, size=2))
    x = Tensor(rng.standard_normal(_shape(rng, 1) + (n_in,)))
    b = Tensor(rng.standard_normal(n_out))
    w = Tensor(rng.standard_normal(x.shape[:-1] + (n_out,)))
    return (lambda t: T.sum(T.linear(x, t, b) * w)), rng.standard_normal((n_in, n_out))


def _case_softmax(rng):
    shape = _shape(rng, 2)
    axis = int(rng.integers(0, 2))
    w = Tensor(rng.standard_normal(shape))
    return (lambda t: T.sum(T.softmax(t, axis=axis) * w)), rng.standard_normal(shape) * 2


def _case_masked_softmax(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
    mask = rng.random(shape) < 0.7
    mask[:, 0] = True
    w = Tensor(rng.standard_normal(shape))
    return (lambda t: T.sum(T.softmax(t, axis=-1, mask=mask) * w)), rng.standard_normal(shape)


def _case_logsumexp(rng):
    shape = _shape(rng, 2)
    w = Tensor(rng.standard_normal(shape[:-1]))
    return (lambda t: T.sum(T.logsumexp(t, axis=-1) * w)), rng.standard_normal(shape) * 2


def _case_layer_norm(rng):
    shape = _shape(rng, 1) + (int(rng.integers(2, 6)),)
    g = Tensor(rng.standard_normal(shape[-1]))
    b = Tensor(rng.standard_normal(shape[-1]))
    w = Tensor(rng.standard_normal(shape))
    return (lambda t: T.sum(T.layer_norm(t, g, b, 1e-5) * w)), rng.standard_normal(shape)


def _case_l2_norm(rng):
    shape = _shape(rng, 2)
    w = Tensor(rng.standard_normal(shape[:-1]))
    return (lambda t: T.sum(T.l2_norm(t, axis=-1) * w)), rng.standard_normal(shape) + 0.1


def _case_cosine(rng):
    shape = _shape(rng, 1) + (int(rng.integers(2, 6)),)
    other = Tensor(rng.standard_normal(shape))
    w = Tensor(rng.standard_normal(shape[:-1]))
    return (lambda t: T.sum(T.cosine(t, other) * w)), rng.standard_normal(shape)


def _case_reductions(rng):
    shape = _shape(rng, 3)
    axis = int(rng.integers(0, 3))
    w = Tensor(rng.standard_normal(shape[:axis] + shape[axis + 1 :]))
    return (lambda t: T.sum((T.sum(t, axis=axis) + T.mean(t, axis=axis)) * w)), rng.standard_normal(shape)


def _case_shape_ops(rng):
    a, b, c = (int(v) for v in rng.integers(1, 4, size=3))
    other = Tensor(rng.standard_normal((a, b, c)))
    w = Tensor(rng.standard_normal((b * c, 2 * a)))

    def f(t):
        joined = T.concat([t, other], axis=0)  # [2a, b, c]
        moved = T.transpose(joined, (1, 2, 0))
        return T.sum(T.reshape(moved, (b * c, 2 * a)) * w)

    return f, rng.standard_normal((a, b, c))


def _case_expand(rng):
    a, b = (int(v) for v in rng.integers(1, 4, size=2))
    w = Tensor(rng.standard_normal((3, a, b)))
    return (lambda t: T.sum(T.expand(t, (3, a, b)) * w)), rng.standard_normal((1, a, b))


def _case_index(rng):
    n, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    idx = rng.integers(0, n, size=(int(rng.integers(1, 4)), int(rng.integers(1, 4))))
    w = Tensor(rng.standard_normal(idx.shape + (d,)))
    return (lambda t: T.sum(t[idx] * w)), rng.standard_normal((n, d))


def _case_gather(rng):
    b, n, d = int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
    idx = rng.integers(0, n, size=(b, int(rng.integers(1, 4))))
    w = Tensor(rng.standard_normal(idx.shape + (d,)))
    return (lambda t: T.sum(T.gather(t, idx) * w)), rng.standard_normal((b, n, d))


def _case_gated_attention(rng):
    from .encoder import gated_attention

    L, dh = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    k = Tensor(rng.standard_normal((L, dh)))
    v = Tensor(rng.standard_normal((L, dh)))
    gates = Tensor(rng.uniform(0.05, 1.0, size=L))
    w = Tensor(rng.standard_normal((L, dh)))
    return (lambda t: T.sum(gated_attention(t, k, v, gates) * w)), rng.standard_normal((L, dh))


OP_CASES: dict[str, Callable] = {
    "add": _case_binary(T.add),
    "sub": _case_binary(T.sub),
    "mul": _case_binary(T.mul),
    "div_numerator": _case_binary(T.div, positive_b=True),
    "div_denominator": _case_binary_right(T.div),
    "matmul": _case_matmul,
    "linear": _case_linear,
    "exp": _case_unary(T.exp),
    "log": _case_unary(T.log, 0.2, 3.0),
    "sqrt": _case_unary(T.sqrt, 0.2, 3.0),
    "sigmoid": _case_unary(T.sigmoid, -4, 4),
    "tanh": _case_unary(T.tanh),
    "gelu": _case_unary(T.gelu, -3, 3),
    "relu": _case_unary(T.relu, kinks=(0.0,)),
    "clamp": _case_unary(lambda t: T.clamp(t, -0.5, 0.5), kinks=(-0.5, 0.5)),
    "softmax": _case_softmax,
    "masked_softmax": _case_masked_softmax,
    "logsumexp": _case_logsumexp,
    "layer_norm": _case_layer_norm,
    "l2_norm": _case_l2_norm,
    "cosine": _case_cosine,
    "sum_mean": _case_reductions,
    "concat_transpose_reshape": _case_shape_ops,
    "expand": _case_expand,
    "index": _case_index,
    "gather": _case_gather,
    "gated_attention": _case_gated_attention,
}


def check_ops(trials: int = 50, seed: int = 0, epsilon: float = 1e-4, ops=None) -> dict[str, float]:
    """Max relative error per op over ``trials`` random float64 instances."""
    rng = np.random.default_rng(seed)
    out = {}
    with T.default_dtype(np.float64):
        for name in ops or OP_CASES:
            worst = 0.0
            for _ in range(trials):
                f, x0 = OP_CASES[name](rng)
                x = Tensor(np.asarray(x0, dtype=np.float64), requires_grad=True)
                worst = max(worst, T.finite_diff_check(f, x, epsilon))
            out[name] = worst
    return out


def desk_model_config(c: int = 2, d: int = 16, layers: int = 2) -> ModelConfig:
    enc = EncoderConfig(vocab_size=32, d=d, layers=layers, heads=2, ffn_dim=2 * d, max_len=64, init_std=0.3)
    return ModelConfig(encoder=enc, intents=IntentConfig(c=c), head_init_std=0.3)


def _model_batch(seed: int, n: int = 2):
    spec = CorpusSpec(
        vocab_size=32, num_latent_intents=4, intents_min=2, intents_max=3, tokens_per_intent=4,
        overlap_threshold=1, text_len=2, attr_len=2, num_train=n, num_valid=0, num_test=0, seed=seed,
    )
    return collate_examples(generate_corpus(spec)["train"])


def check_model(
    config: ModelConfig | None = None,
    seed: int = 0,
    epsilon: float = 1e-4,
    samples_per_param: int = 6,
    components=COMPONENTS + ("total",),
) -> dict[str, float]:
    """Max relative error of each loss component's gradient over all parameters.

    Every parameter tensor contributes ``samples_per_param`` random entries.
    """
    config = config or desk_model_config()
    # a stop-gradient makes the analytic gradient differ from the numerical one by design
    config = replace(config, intents=replace(config.intents, dis_encoder_grad=True))
    rng = np.random.default_rng(seed)
    batch = _model_batch(seed)
    with T.default_dtype(np.float64):
        params = init_params(config, seed).astype(np.float64)
        with T.no_grad():
            delta = forward(params, config, batch).losses.delta_l
        out = {}
        for comp in components:
            worst = 0.0
            for name, p in params.items():

                def f(_x, comp=comp):
                    return getattr(forward(params, config, batch, frozen_delta=delta).losses, comp)

                k = min(samples_per_param, p.size)
                idx = rng.choice(p.size, size=k, replace=False)
                params.zero_grad()
                worst = max(worst, T.finite_diff_check(f, p, epsilon, idx))
            out[comp] = worst
    return out


@dataclass
class GradCheckReport:
    ops: dict[str, float] = field(default_factory=dict)
    components: dict[str, float] = field(default_factory=dict)
    op_tolerance: float = 1e-4
    component_tolerance: float = 1e-3

    @property
    def passed(self) -> bool:
        return all(v < self.op_tolerance for v in self.ops.values()) and all(
            v < self.component_tolerance for v in self.components.values()
        )

    def lines(self) -> list[str]:
        out = [f"op {k:28s} max_rel_err {v:.3e}" for k, v in self.ops.items()]
        out += [f"loss {k:26s} max_rel_err {v:.3e}" for k, v in self.components.items()]
        return out


def run_suite(seed: int = 0, trials: int = 50, config: ModelConfig | None = None) -> GradCheckReport:
    return GradCheckReport(ops=check_ops(trials, seed), components=check_model(config, seed))
