"""Constraint classifier: initialisation, loss and gradients, drivable region."""

import numpy as np
import pytest

from drive_constraints import cli
from drive_constraints.constraint import (
    DEMO,
    PLANNER,
    LabeledExample,
    SceneContext,
    classify,
    constraint_loss,
    context_from_instance,
    drivable_region,
    init_from_vae,
    is_constrained,
    load_constraint,
    save_constraint,
)
from drive_constraints.dataset import load_instances, select_split
from drive_constraints.density import build_vae, save_vae
from drive_constraints.neural import OptimizerState, check_gradients, step
from drive_constraints.ogm import GRID_PRESETS
from drive_constraints.scene import RoadSpec, VehicleState

SHAPE = (1, 4, 4)


def _model(seed=0, **kw):
    vae = build_vae(SHAPE, latent_dim=3, hidden=8, seed=seed)
    return init_from_vae(vae, hidden=4, seed=seed, **kw)


def _examples(label, images):
    return [LabeledExample(img, label) for img in images]


def _blocks():
    a = np.zeros(SHAPE)
    a[:, :2, :] = 1.0
    b = np.zeros(SHAPE)
    b[:, :, 2:] = 1.0
    return a, b


def test_initial_model_outputs_the_prior_everywhere():
    model = _model()
    x = np.random.default_rng(0).random((5,) + SHAPE)
    np.testing.assert_allclose(classify(model, x), 0.1, rtol=1e-12)
    assert not is_constrained(model, x).any()
    assert classify(model, x[0]) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        _model(bias_prior=1.0)


def test_initialisation_copies_the_backbone():
    vae = build_vae(SHAPE, latent_dim=3, hidden=8)
    model = init_from_vae(vae)
    model.backbone.decoder.params[-2]["b"][:] = 5.0
    assert not vae.decoder.params[-2]["b"].any()


def test_threshold_one_never_constrains():
    model = _model()
    model.head.params[-1]["b"][:] = 30.0  # sigmoid saturates towards 1
    x = np.random.default_rng(1).random((4,) + SHAPE)
    assert is_constrained(model, x).all()
    model.decision_threshold = 1.0
    assert not is_constrained(model, x).any()


@pytest.mark.parametrize("seed", range(20))
def test_constraint_loss_gradients_match_finite_differences(seed):
    model = _model(seed)
    rng = np.random.default_rng(seed)
    for p in model.head.params:
        if p:
            p["W"][:] = rng.standard_normal(p["W"].shape)
    demo = rng.random((3,) + SHAPE)
    planner = rng.random((2,) + SHAPE)
    eps = rng.standard_normal((3, 3))
    vae = model.backbone
    params = vae.encoder.params + vae.decoder.params + model.head.params

    def run():
        loss, g, _ = constraint_loss(model, demo, planner, 0.3, eps, 0.5, 2.0)
        return loss, g.encoder + g.decoder + g.head

    assert check_gradients(params, run) < 1e-4


def test_loss_parts_at_initialisation():
    model = _model()
    a, b = _blocks()
    loss, _, parts = constraint_loss(
        model, _examples(DEMO, [a, a]), _examples(PLANNER, [b]), 0.0, 0
    )
    assert parts["demo_bce"] == pytest.approx(-2 * np.log(0.9 + 1e-7))
    assert parts["planner_bce"] == pytest.approx(-np.log(0.1 + 1e-7))
    assert parts["beta_kl"] == 0.0
    assert loss == pytest.approx(sum(parts.values()))


def test_planner_pairs_never_train_the_decoder():
    model = _model()
    model.head.params[-1]["W"][:] = 1.0
    _, b = _blocks()
    _, grads, parts = constraint_loss(model, [], _examples(PLANNER, [b, b]), 1e-3, 0)
    assert parts["rmse"] == 0.0
    assert all(not g.any() for layer in grads.decoder for g in layer.values())
    assert any(g.any() for layer in grads.encoder for g in layer.values())


def test_batches_must_carry_their_own_label():
    a, _ = _blocks()
    with pytest.raises(ValueError, match="label"):
        LabeledExample(a, "maybe")
    with pytest.raises(ValueError, match="in the demo_unconstrained batch"):
        constraint_loss(_model(), _examples(PLANNER, [a]), [], 0.0, 0)


def test_empty_batches_give_zero_loss():
    loss, grads, _ = constraint_loss(_model(), [], [], 0.0, 0)
    assert loss == 0.0
    assert all(not g.any() for layer in grads.head for g in layer.values())


def test_training_separates_demo_from_planner_pairs():
    model = _model(seed=1)
    a, b = _blocks()
    vae = model.backbone
    opts = [
        OptimizerState.for_model(net, 1e-2)
        for net in (vae.encoder, vae.decoder, model.head)
    ]
    demo, planner = _examples(DEMO, [a] * 4), _examples(PLANNER, [b] * 4)
    for i in range(300):
        _, g, _ = constraint_loss(model, demo, planner, 1e-3, i, 0.25, 0.25)
        for opt, net, grads in zip(
            opts, (vae.encoder, vae.decoder, model.head), (g.encoder, g.decoder, g.head)
        ):
            step(opt, net, grads)
    assert classify(model, b) > 0.5 > classify(model, a)


def test_frozen_backbone_flag_survives_a_checkpoint(tmp_path):
    model = _model(freeze_backbone=True, decision_threshold=0.7)
    path = save_constraint(tmp_path / "g.ckpt", model)
    loaded = load_constraint(path)
    assert loaded.freeze_backbone and loaded.decision_threshold == 0.7
    x = np.random.default_rng(3).random((3,) + SHAPE)
    np.testing.assert_array_equal(classify(loaded, x), classify(model, x))


def test_loading_a_bare_vae_as_a_constraint_fails(tmp_path):
    path = save_vae(tmp_path / "vae.ckpt", build_vae(SHAPE, latent_dim=3, hidden=8))
    with pytest.raises(ValueError, match="not a constraint model"):
        load_constraint(path)


# --- drivable region ---


@pytest.fixture
def scene():
    ego = VehicleState(100.0, 5.55, 20.0)
    frame = np.array([VehicleState(115.0, 5.55, 18.0).as_row()])
    return SceneContext(frame, RoadSpec(3), ego)


def _grid_model(grid, **kw):
    vae = build_vae(grid.pair_shape, latent_dim=4, hidden=8)
    return init_from_vae(vae, hidden=4, **kw)


def test_untrained_model_leaves_everything_drivable(scene):
    grid = GRID_PRESETS["desk"]
    mask = drivable_region(
        _grid_model(grid), scene, np.arange(-8.0, 9.0, 4.0), [-3.7, 0.0, 3.7], grid
    )
    assert mask.shape == (5, 3)
    assert mask.all()


def test_saturated_model_marks_nothing_drivable(scene):
    grid = GRID_PRESETS["desk"]
    model = _grid_model(grid)
    model.head.params[-1]["b"][:] = 30.0
    mask = drivable_region(model, scene, [0.0, 4.0], [0.0], grid)
    assert not mask.any()


def test_offsets_must_stay_inside_the_grid(scene):
    grid = GRID_PRESETS["desk"]
    with pytest.raises(ValueError, match="coverage"):
        drivable_region(_grid_model(grid), scene, [40.0], [0.0], grid)
    with pytest.raises(ValueError, match="coverage"):
        drivable_region(_grid_model(grid), scene, [0.0], [9.0], grid)


def test_context_from_instance_uses_the_anchor_frame(make_instance):
    inst = make_instance(neighbors=[(25.0, 1.85, 18.0)])
    ctx = context_from_instance(inst)
    np.testing.assert_array_equal(ctx.frame, inst.neighbors[:, 0, :])
    assert ctx.ego.s == inst.ego_track[0].s


@pytest.mark.slow
def test_learned_model_keeps_the_ego_out_of_neighbors(acceptance_run):
    grid = GRID_PRESETS["desk"]
    model = load_constraint(acceptance_run / cli.CONSTRAINT)
    eval_set = select_split(load_instances(acceptance_run / cli.DATASET), "eval")
    lat_half, long_half = (c / 2 for c in grid.coverage)
    blocked = tried = 0
    for i in np.random.default_rng(0).permutation(len(eval_set)):
        inst = eval_set[i]
        ctx = context_from_instance(inst)
        offsets = [
            (row[0] - ctx.ego.s, row[1] - ctx.ego.d)
            for row in ctx.frame
            if abs(row[0] - ctx.ego.s) <= long_half and abs(row[1] - ctx.ego.d) <= lat_half
        ]
        if not offsets:
            continue
        ds, dd = offsets[0]
        mask = drivable_region(model, ctx, [ds], [dd], grid, dt=inst.dt)
        blocked += not mask[0, 0]
        tried += 1
        if tried == 50:
            break
    assert tried == 50
    assert blocked >= 45
