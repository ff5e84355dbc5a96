"""Numpy substrate: layer shapes, analytic gradients, Adam, checkpoints."""

import numpy as np
import pytest

from drive_constraints.neural import (
    MAGIC,
    NetworkModel,
    OptimizerState,
    backward,
    check_gradients,
    forward,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    step,
    zero_grads,
)

PLANS = {
    "dense": ((6,), [("dense", 5), ("act",), ("dense", 3)]),
    "conv": ((2, 4, 4), [("conv", 3), ("act",), ("flatten",), ("dense", 2)]),
    "deconv": ((4,), [("dense", 12), ("reshape", (3, 2, 2)), ("deconv", 2), ("act",)]),
    "stack": (
        (1, 8, 4),
        [("conv", 2), ("act",), ("conv", 3), ("flatten",), ("dense", 4), ("act",)],
    ),
}


def _linear_loss(seed):
    """loss = sum(y * r) for a fixed random r."""
    cache = {}

    def loss_fn(y):
        if "r" not in cache:
            cache["r"] = np.random.default_rng(seed + 1000).standard_normal(y.shape)
        return float(np.sum(y * cache["r"])), cache["r"]

    return loss_fn


@pytest.mark.parametrize("name", sorted(PLANS))
def test_layer_shapes_compose(name):
    shape, plan = PLANS[name]
    model = NetworkModel.build(shape, plan, seed=0)
    y, _ = forward(model, np.zeros((3,) + shape))
    assert y.shape == (3,) + model.output_shape


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", sorted(PLANS))
def test_analytic_gradients_match_finite_differences(name, seed):
    shape, plan = PLANS[name]
    model = NetworkModel.build(shape, plan, seed=seed)
    x = np.random.default_rng(seed).standard_normal((3,) + shape)
    assert grad_check(model, _linear_loss(seed), x) < 1e-4


def test_input_gradient_matches_finite_differences():
    shape, plan = PLANS["stack"]
    model = NetworkModel.build(shape, plan, seed=4)
    x = np.random.default_rng(4).standard_normal((2,) + shape)
    loss_fn = _linear_loss(4)

    def run():
        y, cache = forward(model, x)
        loss, dy = loss_fn(y)
        return loss, [{"x": backward(model, cache, dy)[1]}]

    assert check_gradients([{"x": x}], run) < 1e-4


def test_conv_halves_and_deconv_doubles():
    conv = NetworkModel.build((3, 8, 6), [("conv", 5)])
    deconv = NetworkModel.build((5, 4, 3), [("deconv", 3)])
    assert conv.output_shape == (5, 4, 3)
    assert deconv.output_shape == (3, 8, 6)
    assert conv.params[0]["W"].shape == (5, 3, 2, 2)
    assert deconv.params[0]["W"].shape == (5, 3, 2, 2)


def test_build_rejects_bad_plans():
    with pytest.raises(ValueError, match="unknown layer kind"):
        NetworkModel.build((4,), [("pool", 2)])
    with pytest.raises(ValueError, match="flat input"):
        NetworkModel.build((2, 4, 4), [("dense", 3)])
    with pytest.raises(ValueError, match="even"):
        NetworkModel.build((2, 5, 4), [("conv", 3)])
    with pytest.raises(ValueError, match="reshape"):
        NetworkModel.build((6,), [("reshape", (4, 2))])


def test_forward_checks_input_shape():
    model = NetworkModel.build((6,), [("dense", 2)])
    with pytest.raises(ValueError, match="batch dimension first"):
        forward(model, np.zeros(6))


def test_forward_flags_non_finite_output():
    model = NetworkModel.build((2,), [("dense", 1)])
    model.params[0]["W"][:] = np.inf
    with pytest.raises(FloatingPointError):
        forward(model, np.ones((1, 2)))


def test_stale_cache_is_rejected_after_an_update():
    model = NetworkModel.build((4,), [("dense", 2)])
    x = np.ones((1, 4))
    y, cache = forward(model, x)
    grads, _ = backward(model, cache, np.ones_like(y))
    step(OptimizerState.for_model(model), model, grads)
    with pytest.raises(ValueError, match="stale"):
        backward(model, cache, np.ones_like(y))


def test_first_adam_step_moves_each_weight_by_the_learning_rate():
    model = NetworkModel.build((3,), [("dense", 2)], seed=1)
    before = model.params[0]["W"].copy()
    grads = zero_grads(model)
    grads[0]["W"][:] = [[1.0, -2.0], [0.5, -0.1], [3.0, 4.0]]
    step(OptimizerState.for_model(model, 0.01), model, grads)
    np.testing.assert_allclose(
        model.params[0]["W"] - before, -0.01 * np.sign(grads[0]["W"]), rtol=1e-5
    )
    np.testing.assert_array_equal(model.params[0]["b"], 0.0)


def test_adam_reduces_a_regression_loss():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((32, 4))
    target = x @ rng.standard_normal((4, 1))
    model = NetworkModel.build((4,), [("dense", 1)], seed=0)
    opt = OptimizerState.for_model(model, 0.02)

    def loss():
        y, cache = forward(model, x)
        return float(np.mean((y - target) ** 2)), cache, y

    first = loss()[0]
    for _ in range(500):
        _, cache, y = loss()
        grads, _ = backward(model, cache, 2 * (y - target) / len(x))
        step(opt, model, grads)
    assert loss()[0] < 0.05 * first


def test_non_finite_gradient_rejects_the_update():
    model = NetworkModel.build((2,), [("dense", 1)])
    before = model.params[0]["W"].copy()
    grads = zero_grads(model)
    grads[0]["W"][0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        step(OptimizerState.for_model(model), model, grads)
    np.testing.assert_array_equal(model.params[0]["W"], before)


def test_checkpoint_restores_every_network(tmp_path):
    enc = NetworkModel.build(*PLANS["conv"], seed=2)
    dec = NetworkModel.build(*PLANS["deconv"], seed=3)
    path = save_checkpoint(tmp_path / "m.ckpt", {"enc": enc, "dec": dec}, {"k": 1})
    nets, meta = load_checkpoint(path)
    assert meta == {"k": 1}
    assert list(nets) == ["enc", "dec"]
    for a, b in ((enc, nets["enc"]), (dec, nets["dec"])):
        assert a.layers == b.layers
        for pa, pb in zip(a.params, b.params):
            for k in pa:
                np.testing.assert_array_equal(pa[k], pb[k])
    again = save_checkpoint(tmp_path / "again.ckpt", nets, meta)
    assert again.read_bytes() == path.read_bytes()
    assert path.read_bytes().startswith(MAGIC)


def test_checkpoint_rejects_foreign_and_truncated_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTANET!" + b"\0" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(bad)
    net = NetworkModel.build((2,), [("dense", 1)])
    good = save_checkpoint(tmp_path / "g.ckpt", {"n": net})
    padded = tmp_path / "padded.ckpt"
    padded.write_bytes(good.read_bytes() + b"\0" * 8)
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(padded)
