"""Gradient routing through the assembled model."""

from dataclasses import replace

import numpy as np
import pytest

from mim import tensors as T
from mim.gradcheck import _model_batch, check_model, desk_model_config
from mim.model import forward, init_params


def _grads(config, component, seed=0):
    batch = _model_batch(seed)
    with T.default_dtype(np.float64):
        params = init_params(config, seed).astype(np.float64)
        with T.no_grad():
            delta = forward(params, config, batch).losses.delta_l
        params.zero_grad()
        T.backward(getattr(forward(params, config, batch, frozen_delta=delta).losses, component))
        return {name: np.zeros_like(p.data) if p.grad is None else p.grad.copy() for name, p in params.items()}


def _with_dis_grad(flag):
    config = desk_model_config()
    return replace(config, intents=replace(config.intents, dis_encoder_grad=flag))


def test_detached_distribution_loss_trains_only_the_intent_projection():
    grads = _grads(_with_dis_grad(False), "dis")
    for name, g in grads.items():
        if name.startswith("intent."):
            assert np.any(g), name
        else:
            assert not np.any(g), name


def test_end_to_end_distribution_loss_reaches_the_encoder():
    grads = _grads(_with_dis_grad(True), "dis")
    assert any(np.any(g) for name, g in grads.items() if not name.startswith(("intent.", "head.")))


def test_detaching_keeps_the_loss_value():
    batch = _model_batch(0)
    values = []
    for flag in (False, True):
        config = _with_dis_grad(flag)
        with T.default_dtype(np.float64), T.no_grad():
            params = init_params(config, 0).astype(np.float64)
            values.append(forward(params, config, batch).losses.dis.item())
    assert values[0] == pytest.approx(values[1], abs=1e-12)


@pytest.mark.parametrize("flag", [False, True])
def test_total_gradient_is_sum_of_components(flag):
    config = _with_dis_grad(flag)
    total = _grads(config, "total")
    parts = [_grads(config, c) for c in ("match", "dis", "kl", "mask")]
    for name, g in total.items():
        np.testing.assert_allclose(g, sum(p[name] for p in parts), rtol=1e-9, atol=1e-12)


def test_grad_check_overrides_the_detached_distribution_loss():
    errors = check_model(_with_dis_grad(False), components=("dis",), samples_per_param=2)
    assert errors["dis"] < 1e-3
