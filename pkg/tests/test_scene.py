"""Road geometry: lane lookup, footprint overlap, leader gaps."""

import math

import numpy as np
import pytest

from drive_constraints.scene import (
    Pose,
    RoadSpec,
    VehicleState,
    lane_center,
    lane_of,
    leader_gap,
    leader_index,
    overlaps_any,
    rect_overlap,
)


def test_lane_centers_and_bounds():
    road = RoadSpec(3)
    assert lane_center(road, 0) == pytest.approx(1.85)
    assert lane_center(road, 2) == pytest.approx(9.25)
    assert road.lateral_bounds == pytest.approx((0.0, 11.1))
    np.testing.assert_allclose(road.boundaries(), [0.0, 3.7, 7.4, 11.1])


@pytest.mark.parametrize("lane", [-1, 3])
def test_lane_center_rejects_unknown_lane(lane):
    with pytest.raises(ValueError, match="lane_id"):
        lane_center(RoadSpec(3), lane)


def test_lane_of_boundary_goes_to_upper_lane_and_clamps():
    road = RoadSpec(3)
    assert lane_of(road, 3.7) == 1
    assert lane_of(road, 3.69) == 0
    assert lane_of(road, -0.5) == 0
    assert lane_of(road, 20.0) == 2


def test_rect_overlap_is_strict():
    a = VehicleState(0.0, 1.85, 20.0)
    touching = VehicleState(4.5, 1.85, 20.0)
    assert not rect_overlap(a, touching)
    assert rect_overlap(a, VehicleState(4.4, 1.85, 20.0))
    assert not rect_overlap(a, VehicleState(0.0, 1.85 + 1.8, 20.0))


def test_overlaps_any_matches_pairwise_check():
    ego = VehicleState(10.0, 1.85, 20.0)
    others = [VehicleState(14.0, 2.5, 18.0), VehicleState(30.0, 1.85, 18.0)]
    rows = np.array([o.as_row() for o in others])
    assert overlaps_any(np.array(ego.as_row()), rows) == any(
        rect_overlap(ego, o) for o in others
    )
    assert not overlaps_any(np.array(ego.as_row()), np.zeros((0, 6)))


def test_leader_gap_picks_nearest_overlapping_vehicle_ahead():
    ego = np.array(VehicleState(0.0, 1.85, 20.0).as_row())
    others = np.array(
        [
            VehicleState(30.0, 1.85, 20.0).as_row(),
            VehicleState(20.0, 1.85, 20.0).as_row(),
            VehicleState(10.0, 5.55, 20.0).as_row(),  # next lane
            VehicleState(-15.0, 1.85, 20.0).as_row(),  # behind
        ]
    )
    assert leader_gap(ego, others) == pytest.approx(20.0 - 4.5)
    assert leader_index(ego, others) == 1
    assert math.isinf(leader_gap(ego, others[2:]))
    assert leader_index(ego, others[2:]) is None
    assert leader_index(ego, np.zeros((0, 6))) is None


def test_invalid_values_raise():
    with pytest.raises(ValueError):
        VehicleState(0.0, 0.0, 0.0, length=0.0)
    with pytest.raises(ValueError):
        RoadSpec(0)
    with pytest.raises(ValueError):
        Pose(0.0, 0.0, -0.1)
