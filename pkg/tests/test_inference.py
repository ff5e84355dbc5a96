"""Constraint inference: labeling rules, epoch loop, convergence, run files."""

import math

import numpy as np
import pandas as pd
import pytest

import drive_constraints.inference as inference
from drive_constraints import cli
from drive_constraints.constraint import DEMO, PLANNER, classify, load_constraint
from drive_constraints.dataset import GAP_M, load_instances, select_split
from drive_constraints.density import DensityThreshold, build_vae, load_vae
from drive_constraints.evaluate import min_leader_gap
from drive_constraints.inference import (
    EpochReport,
    InferenceConfig,
    InferenceDiverged,
    label_epoch,
    reports_frame,
    run_inference,
)
from drive_constraints.ogm import GRID_PRESETS
from drive_constraints.planner import SamplingSpec, plan

DESK = GRID_PRESETS["desk"]
SMALL = SamplingSpec(lateral_count=3, speed_count=3)
EVERYTHING = DensityThreshold(0.0)
NOTHING = DensityThreshold(math.inf)


@pytest.fixture(scope="module")
def vae():
    return build_vae(DESK.pair_shape, latent_dim=4, hidden=8, seed=0)


@pytest.fixture
def instances(make_instance):
    return [
        make_instance(ego_d=1.85, neighbors=[(40.0, 1.85, 18.0)], instance_id="a"),
        make_instance(ego_d=5.55, neighbors=[(-20.0, 5.55, 22.0)], instance_id="b"),
        make_instance(ego_d=9.25, instance_id="c"),
    ]


def _config(**kw):
    base = dict(
        max_epochs=2,
        planner_batch=3,
        steps_per_epoch=3,
        batch_size=4,
        pair_stride=10,
        seed=7,
    )
    base.update(kw)
    return InferenceConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError, match="max_epochs"):
        InferenceConfig(max_epochs=0)
    with pytest.raises(ValueError, match="convergence"):
        InferenceConfig(convergence_new_constrained_frac=1.5)
    with pytest.raises(ValueError):
        InferenceConfig(pair_stride=0)


def test_epoch_report_fraction():
    assert EpochReport(1, 0, 0, 10, 0).new_constrained_frac == 0.0
    assert EpochReport(1, 40, 10, 10, 0).new_constrained_frac == 0.25
    with pytest.raises(ValueError, match="constrained labels"):
        EpochReport(1, 4, 5, 10, 0)


# --- labeling ---


def test_infinite_threshold_labels_nothing_constrained(instances, vae):
    demo, planner, report = label_epoch(
        instances, None, vae, NOTHING, SMALL, DESK, pair_stride=10
    )
    assert planner == [] and report.labeled_constrained == 0
    # 40 pair timesteps per instance at stride 10
    assert report.demo_pairs == len(demo) == 3 * 4
    assert report.planner_pairs_total == 3 * 4
    assert all(ex.label == DEMO for ex in demo)
    assert {ex.instance_id for ex in demo} == {"a", "b", "c"}
    assert math.isnan(report.gap_violation_frac)


def test_zero_threshold_labels_every_chosen_pair(instances, vae):
    demo, planner, report = label_epoch(
        instances, None, vae, EVERYTHING, SMALL, DESK, pair_stride=10
    )
    assert report.labeled_constrained == report.planner_pairs_total == len(planner)
    assert all(ex.label == PLANNER for ex in planner)
    assert [ex.t for ex in planner[:4]] == [0, 10, 20, 30]
    # demonstrations are never labelled constrained
    assert all(ex.label == DEMO for ex in demo)


def test_gap_violations_are_reported_when_the_gap_is_known(instances, vae):
    _, _, report = label_epoch(
        instances, None, vae, NOTHING, SMALL, DESK, pair_stride=10, gap_m=1e6
    )
    # only "a" ever has a vehicle ahead, and any finite gap is below 1e6

    assert report.gap_violation_frac == pytest.approx(1 / 3)


@pytest.mark.slow
def test_closing_within_the_gap_gets_planner_pairs_labeled(acceptance_run):
    vae, threshold = load_vae(acceptance_run / cli.VAE)
    eval_set = select_split(load_instances(acceptance_run / cli.DATASET), "eval")
    spec = SamplingSpec()
    closing = [
        inst
        for inst in eval_set
        if min_leader_gap(inst, plan(inst, None, spec, DESK).chosen.candidate.ego_array)
        < GAP_M
    ]
    assert closing
    _, planner, report = label_epoch(
        closing[:20], None, vae, threshold, spec, DESK, pair_stride=5, gap_m=GAP_M
    )
    assert report.gap_violation_frac == 1.0
    assert report.labeled_constrained >= 1
    assert all(ex.label == PLANNER for ex in planner)


def test_labeling_errors_name_the_instance(make_instance, vae):
    short = make_instance(t_steps=30, instance_id="short-one")
    with pytest.raises(ValueError, match="labeling instance short-one"):
        label_epoch([short], None, vae, NOTHING, SMALL, DESK)


# --- the loop ---


def test_nothing_new_converges_after_one_untrained_epoch(instances, vae):
    model, reports = run_inference(instances, vae, NOTHING, _config(), SMALL, DESK)
    assert len(reports) == 1
    assert reports[0].converged and reports[0].mean_loss_parts == {}
    x = np.random.default_rng(0).random((3,) + DESK.pair_shape)
    np.testing.assert_allclose(classify(model, x), 0.1, rtol=1e-12)


def test_loop_runs_to_max_epochs_while_labels_keep_coming(instances, vae, tmp_path):
    model, reports = run_inference(
        instances, vae, EVERYTHING, _config(), SMALL, DESK, run_dir=tmp_path
    )
    assert [r.epoch for r in reports] == [1, 2]
    assert not any(r.converged for r in reports)
    # the planner pool accumulates across epochs
    assert reports[1].planner_pool == (
        reports[0].labeled_constrained + reports[1].labeled_constrained
    )
    assert set(reports[0].mean_loss_parts) == {"demo_bce", "planner_bce", "rmse", "beta_kl"}
    for name in ("epoch_001.ckpt", "epoch_002.ckpt", "epoch_reports.csv"):
        assert (tmp_path / name).exists()
    saved = load_constraint(tmp_path / "epoch_002.ckpt")
    x = np.random.default_rng(1).random((2,) + DESK.pair_shape)
    np.testing.assert_array_equal(classify(saved, x), classify(model, x))
    table = pd.read_csv(tmp_path / "epoch_reports.csv")
    assert table["epoch"].tolist() == [1, 2]


def test_inference_is_deterministic_per_seed(instances, vae):
    a, ra = run_inference(instances, vae, EVERYTHING, _config(), SMALL, DESK)
    b, rb = run_inference(instances, vae, EVERYTHING, _config(), SMALL, DESK)
    pd.testing.assert_frame_equal(reports_frame(ra), reports_frame(rb))
    x = np.random.default_rng(2).random((2,) + DESK.pair_shape)
    np.testing.assert_array_equal(classify(a, x), classify(b, x))


def test_frozen_backbone_only_trains_the_head(instances, vae):
    model, _ = run_inference(
        instances, vae, EVERYTHING, _config(freeze_backbone=True), SMALL, DESK
    )
    for got, want in zip(model.backbone.encoder.params, vae.encoder.params):
        for k in want:
            np.testing.assert_array_equal(got[k], want[k])


def test_divergence_keeps_the_last_good_model(instances, vae, tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise FloatingPointError("non-finite constraint loss")

    monkeypatch.setattr(inference, "constraint_loss", boom)
    with pytest.raises(InferenceDiverged, match="epoch 1") as caught:
        run_inference(
            instances, vae, EVERYTHING, _config(), SMALL, DESK, run_dir=tmp_path
        )
    assert caught.value.reports == []
    assert isinstance(caught.value, FloatingPointError)
    assert (tmp_path / "last_good.ckpt").exists()


def test_no_training_instances_is_an_error(vae):
    with pytest.raises(ValueError, match="at least one"):
        run_inference([], vae, NOTHING)


def test_reports_frame_columns():
    frame = reports_frame([EpochReport(1, 8, 2, 8, 0, 2, {"rmse": 0.5})])
    assert list(frame.columns) == [
        "epoch",
        "planner_pairs_total",
        "labeled_constrained",
        "demo_pairs",
        "planner_pool",
        "no_solution_count",
        "converged",
        "gap_violation_frac",
        "loss_demo_bce",
        "loss_planner_bce",
        "loss_rmse",
        "loss_beta_kl",
    ]
    assert frame["loss_rmse"].iloc[0] == 0.5
    assert math.isnan(frame["loss_demo_bce"].iloc[0])
