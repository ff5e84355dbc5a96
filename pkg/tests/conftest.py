"""Shared pytest configuration and fixtures.

Tests marked `slow` (VAE training on a few thousand pairs and full constraint
inference runs, minutes each) are skipped by default so a plain `pytest` run
finishes quickly. Run them with `pytest --runslow`.
"""

import numpy as np
import pytest

from drive_constraints import cli
from drive_constraints.dataset import (
    CostSpec,
    DemonstrationInstance,
    reset_dataset_warnings,
)
from drive_constraints.evaluate import reset_evaluate_warnings
from drive_constraints.scene import Pose, RoadSpec


def pytest_addoption(parser):
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="also run slow training and end-to-end tests",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="slow training test; use --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


ACCEPTANCE_CONFIG = (
    "seed = 7\n"
    "threads = 4\n"
    "lanes = 3\n"
    "vehicles = 12\n"
    "duration = 120\n"
)


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    """Run directory of one desk-scale gen-data, train-vae, train-constraint,
    evaluate pipeline (12 vehicles over 120 s, about 345 eval instances).

    Built once per session for the slow tests that read its outputs.
    """
    root = tmp_path_factory.mktemp("acceptance")
    cfg = root / "acceptance.cfg"
    cfg.write_text(ACCEPTANCE_CONFIG)
    out = root / "run"
    for command in ("gen-data", "train-vae", "train-constraint", "evaluate"):
        assert cli.main([command, "--out", str(out), "--config", str(cfg)]) == 0, command
    return out


@pytest.fixture(autouse=True)
def _fresh_warning_registries():
    reset_dataset_warnings()
    reset_evaluate_warnings()
    yield


def _build_instance(
    ego_d=1.85,
    ego_v=20.0,
    neighbors=(),
    t_steps=50,
    dt=0.1,
    lanes=3,
    target_lane=0,
    split="eval",
    instance_id="v0-f0",
):
    """Hand-built instance: ego at constant speed in a straight line, each
    neighbor given as (s0, d, v_s) and driven at constant speed too."""
    road = RoadSpec(lanes)
    t = np.arange(t_steps) * dt
    ego_track = tuple(
        Pose(float(ego_v * tk), ego_d, float(tk), ego_v, 0.0) for tk in t
    )
    nb = np.zeros((len(neighbors), t_steps, 6))
    for i, (s0, d, v) in enumerate(neighbors):
        nb[i, :, 0] = s0 + v * t
        nb[i, :, 1] = d
        nb[i, :, 2] = v
        nb[i, :, 4] = 4.5
        nb[i, :, 5] = 1.8
    return DemonstrationInstance(
        id=instance_id,
        anchor_frame=0,
        ego_track=ego_track,
        neighbors=nb,
        cost_spec=CostSpec(road.speed_limit, (target_lane + 0.5) * road.lane_width),
        road=road,
        ego_id=0,
        neighbor_ids=tuple(range(1, len(neighbors) + 1)),
        dt=dt,
        split=split,
    )


@pytest.fixture
def make_instance():
    return _build_instance
