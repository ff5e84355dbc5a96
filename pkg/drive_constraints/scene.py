"""Road-frame geometry shared by every other module.

The road is straight, so the Frenet frame and the Cartesian frame coincide:
``s`` runs along the road (m) and ``d`` is the lateral offset from the left
road edge (m). Vehicles are axis-aligned rectangles in (s, d); heading is not
modelled.

Lane k occupies d in [k * lane_width, (k + 1) * lane_width) and its center is
(k + 0.5) * lane_width. The drivable band is [0, lane_count * lane_width].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LANE_WIDTH = 3.7  # m, standard US freeway lane
VEHICLE_LENGTH = 4.5  # m
VEHICLE_WIDTH = 1.8  # m
SPEED_LIMIT = 24.0  # m/s
ROAD_LENGTH = 400.0  # m, initial placement segment for synthetic traffic


@dataclass(frozen=True)
class VehicleState:
    """One vehicle at one instant."""

    s: float
    d: float
    v_s: float
    v_d: float = 0.0
    length: float = VEHICLE_LENGTH
    width: float = VEHICLE_WIDTH
    lane_id: int = 0

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(
                f"vehicle footprint must be positive, got length={self.length} "
                f"width={self.width}"
            )

    def as_row(self) -> tuple[float, float, float, float, float, float]:
        """(s, d, v_s, v_d, length, width), the layout used by frame arrays."""
        return (self.s, self.d, self.v_s, self.v_d, self.length, self.width)


@dataclass(frozen=True)
class RoadSpec:
    lane_count: int = 3
    lane_width: float = LANE_WIDTH
    length: float = ROAD_LENGTH
    speed_limit: float = SPEED_LIMIT

    def __post_init__(self):
        if self.lane_count < 1:
            raise ValueError(f"lane_count must be >= 1, got {self.lane_count}")
        if self.lane_width <= 0:
            raise ValueError(f"lane_width must be > 0, got {self.lane_width}")
        if self.speed_limit <= 0:
            raise ValueError(f"speed_limit must be > 0, got {self.speed_limit}")

    @property
    def lateral_bounds(self) -> tuple[float, float]:
        return 0.0, self.lane_count * self.lane_width

    def boundaries(self) -> np.ndarray:
        """Lateral positions of every lane line, edges included."""
        return np.arange(self.lane_count + 1) * self.lane_width


@dataclass(frozen=True)
class Pose:
    """Ego position at time ``t`` seconds after the anchor.

    The velocities are carried along because the action encoding needs them.
    """

    s: float
    d: float
    t: float
    v_s: float = 0.0
    v_d: float = 0.0

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"pose time offset must be >= 0, got {self.t}")


def lane_center(road: RoadSpec, lane_id: int) -> float:
    if not 0 <= lane_id < road.lane_count:
        raise ValueError(
            f"lane_id {lane_id} outside [0, {road.lane_count - 1}] "
            f"for a {road.lane_count}-lane road"
        )
    return (lane_id + 0.5) * road.lane_width


def lane_of(road: RoadSpec, d: float) -> int:
    """Lane containing lateral offset ``d``; boundaries go to the upper lane."""
    lane = math.floor(d / road.lane_width)
    return min(max(lane, 0), road.lane_count - 1)


def rect_overlap(a: VehicleState, b: VehicleState) -> bool:
    """True iff the two footprints intersect with positive area."""
    return (
        abs(a.s - b.s) < 0.5 * (a.length + b.length)
        and abs(a.d - b.d) < 0.5 * (a.width + b.width)
    )


def overlaps_any(ego: np.ndarray, others: np.ndarray) -> bool:
    """Vectorised rect_overlap of one (s, d, ., ., length, width) row
    against an (n, 6) frame array."""
    if len(others) == 0:
        return False
    ds = np.abs(others[:, 0] - ego[0])
    dd = np.abs(others[:, 1] - ego[1])
    hit = (ds < 0.5 * (others[:, 4] + ego[4])) & (dd < 0.5 * (others[:, 5] + ego[5]))
    return bool(hit.any())


def leader_index(ego: np.ndarray, others: np.ndarray) -> int | None:
    """Row of the nearest vehicle ahead that overlaps ``ego`` laterally, or
    None. Rows follow the frame-array layout."""
    if len(others) == 0:
        return None
    lateral = np.abs(others[:, 1] - ego[1]) < 0.5 * (others[:, 5] + ego[5])
    rows = np.flatnonzero(lateral & (others[:, 0] > ego[0]))
    if len(rows) == 0:
        return None
    # nearest rear bumper, not nearest center
    return int(rows[np.argmin(others[rows, 0] - 0.5 * others[rows, 4])])


def leader_gap(ego: np.ndarray, others: np.ndarray) -> float:
    """Bumper gap to the leader (see ``leader_index``); ``inf`` without one."""
    i = leader_index(ego, others)
    if i is None:
        return math.inf
    return float(others[i, 0] - ego[0] - 0.5 * (others[i, 4] + ego[4]))
