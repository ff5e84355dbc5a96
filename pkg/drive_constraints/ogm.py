"""Ego-centric dynamic occupancy grid maps (OGMs).

A state-action pair becomes a 7-plane image, plane order:

    [occ_state, vs_state, vd_state, lanes, occ_action, vs_action, vd_action]

Rows run along the road (row index grows with s), columns across it. The
anchor ego sits at cell (height/2, width/2). A cell is occupied when its
center lies inside a footprint, edges included. Velocity planes hold the
actor's velocity minus the anchor velocity, divided by ``v_norm``, and are 0
wherever occupancy is 0.

Pairs are per timestep: the state at step t with the ego's own poses over
[t, t + window] as the action, both anchored at the ego pose at t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .scene import VEHICLE_LENGTH, VEHICLE_WIDTH, RoadSpec, VehicleState

if TYPE_CHECKING:
    from .dataset import DemonstrationInstance

V_NORM = 24.0  # m/s, the planner's top sampled speed
ACTION_WINDOW_S = 1.0  # s
PLANE_NAMES = (
    "occ_state",
    "vs_state",
    "vd_state",
    "lanes",
    "occ_action",
    "vs_action",
    "vd_action",
)
_EDGE = 1e-9


@dataclass(frozen=True)
class GridSpec:
    resolution: float = 0.5
    width_cells: int = 32
    height_cells: int = 128
    v_norm: float = V_NORM

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError(f"resolution must be > 0, got {self.resolution}")
        if self.width_cells % 2 or self.height_cells % 2:
            raise ValueError(
                f"grid extents must be even to center the ego, got "
                f"{self.width_cells}x{self.height_cells}"
            )
        if self.v_norm <= 0:
            raise ValueError(f"v_norm must be > 0, got {self.v_norm}")

    @property
    def center(self) -> tuple[int, int]:
        return self.height_cells // 2, self.width_cells // 2

    @property
    def coverage(self) -> tuple[float, float]:
        """(lateral, longitudinal) extent in meters."""
        return (
            self.width_cells * self.resolution,
            self.height_cells * self.resolution,
        )

    @property
    def pair_shape(self) -> tuple[int, int, int]:
        return (len(PLANE_NAMES), self.height_cells, self.width_cells)


GRID_PRESETS = {
    "full": GridSpec(0.5, 32, 128),
    "desk": GridSpec(1.0, 16, 64),
}


@dataclass(frozen=True, eq=False)
class DynamicOgm:
    channels: np.ndarray  # (3, H, W): occupancy, v_s_rel, v_d_rel
    spec: GridSpec


@dataclass(frozen=True, eq=False)
class StateActionImage:
    planes: np.ndarray  # (7, H, W)
    anchor: VehicleState


def _round(x):
    # half-up: a point exactly on a cell edge goes to the higher-index cell.
    # round() would send it up or down depending on the parity of the cell.
    return math.floor(x + 0.5)


def to_cell(spec: GridSpec, anchor: VehicleState, target_s: float, target_d: float):
    """Grid cell of a road position, or None when it falls outside the grid."""
    # the anchor sits on cell (H/2, W/2), so an offset of k resolutions is
    # k cells from there; with even extents the grid spans [-H/2, H/2) cells
    row = spec.height_cells // 2 + _round((target_s - anchor.s) / spec.resolution)
    col = spec.width_cells // 2 + _round((target_d - anchor.d) / spec.resolution)
    if 0 <= row < spec.height_cells and 0 <= col < spec.width_cells:
        return row, col
    return None


def _as_rows(frame) -> np.ndarray:
    if isinstance(frame, np.ndarray):
        return frame.reshape(-1, 6)
    return np.array([v.as_row() for v in frame], dtype=float).reshape(-1, 6)


def _paint(planes, spec, anchor, row):
    """Rasterize one footprint row (s, d, v_s, v_d, length, width) into a
    3-plane block; ``anchor`` is (s, d, v_s, v_d)."""
    res = spec.resolution
    h2, w2 = spec.height_cells // 2, spec.width_cells // 2
    ds, dd = row[0] - anchor[0], row[1] - anchor[1]
    r0 = max(math.ceil(h2 + (ds - 0.5 * row[4]) / res - _EDGE), 0)
    r1 = min(math.floor(h2 + (ds + 0.5 * row[4]) / res + _EDGE), spec.height_cells - 1)
    c0 = max(math.ceil(w2 + (dd - 0.5 * row[5]) / res - _EDGE), 0)
    c1 = min(math.floor(w2 + (dd + 0.5 * row[5]) / res + _EDGE), spec.width_cells - 1)
    if r0 > r1 or c0 > c1:
        return
    planes[0, r0 : r1 + 1, c0 : c1 + 1] = 1.0
    planes[1, r0 : r1 + 1, c0 : c1 + 1] = (row[2] - anchor[2]) / spec.v_norm
    planes[2, r0 : r1 + 1, c0 : c1 + 1] = (row[3] - anchor[3]) / spec.v_norm


def _anchor(anchor) -> tuple[float, float, float, float]:
    if isinstance(anchor, VehicleState):
        return anchor.s, anchor.d, anchor.v_s, anchor.v_d
    return tuple(float(x) for x in anchor[:4])


def rasterize(frame, anchor, spec: GridSpec) -> DynamicOgm:
    """Occupancy and relative-velocity planes for a set of footprints."""
    a = _anchor(anchor)
    planes = np.zeros((3, spec.height_cells, spec.width_cells))
    for row in _as_rows(frame):
        _paint(planes, spec, a, row)
    return DynamicOgm(planes, spec)


def _lane_plane(out, road: RoadSpec, anchor_d: float, spec: GridSpec):
    w2 = spec.width_cells // 2
    for b in road.boundaries():
        col = w2 + _round((b - anchor_d) / spec.resolution)
        if 0 <= col < spec.width_cells:
            out[:, col] = 1.0


def encode_state(frame, road: RoadSpec, anchor, spec: GridSpec) -> np.ndarray:
    """4-plane state image: neighbor dynamic OGM plus lane markings.

    ``frame`` is a sequence of VehicleState or an (n, 6) frame array.
    """
    a = _anchor(anchor)
    out = np.zeros((4, spec.height_cells, spec.width_cells))
    for row in _as_rows(frame):
        _paint(out[:3], spec, a, row)
    _lane_plane(out[3], road, a[1], spec)
    return out


def encode_action(
    window,
    anchor,
    spec: GridSpec,
    length: float = VEHICLE_LENGTH,
    width: float = VEHICLE_WIDTH,
) -> np.ndarray:
    """3-plane action image of the ego footprint over a window of poses.

    ``window`` is a sequence of Pose or an (n, >=4) array of (s, d, v_s, v_d).
    Later poses overwrite earlier ones where footprints overlap.
    """
    if len(window) == 0:
        raise ValueError("action window is empty")
    if isinstance(window, np.ndarray):
        arr = window[:, :4]
    else:
        times = [p.t for p in window]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("action window poses are not time-ordered")
        arr = np.array([(p.s, p.d, p.v_s, p.v_d) for p in window], dtype=float)
    a = _anchor(anchor)
    out = np.zeros((3, spec.height_cells, spec.width_cells))
    for s, d, v_s, v_d in arr:
        _paint(out, spec, a, (s, d, v_s, v_d, length, width))
    return out


def state_action_image(state: np.ndarray, action: np.ndarray, anchor) -> StateActionImage:
    if state.shape[0] != 4 or action.shape[0] != 3:
        raise ValueError(
            f"expected 4 state planes and 3 action planes, got "
            f"{state.shape[0]} and {action.shape[0]}"
        )
    return StateActionImage(np.concatenate([state, action]), anchor)


def window_steps(window_s: float, dt: float) -> int:
    return round(window_s / dt)


def pair_timesteps(t_steps: int, window_s: float, dt: float, stride: int = 1):
    """Timesteps t that have a full action window inside the horizon."""
    n_a = window_steps(window_s, dt)
    if not 0 <= n_a < t_steps:
        raise ValueError(
            f"action window of {window_s} s ({n_a} steps) does not fit a "
            f"{t_steps}-step horizon"
        )
    return list(range(0, t_steps - n_a, stride))


def shared_steps(instance: "DemonstrationInstance", ego) -> int:
    """Frames covered by both the recorded neighbors and ``ego``."""
    return min(instance.t_steps, len(ego))


def trajectory_pairs(
    instance: "DemonstrationInstance",
    ego: np.ndarray,
    spec: GridSpec,
    window_s: float = ACTION_WINDOW_S,
    stride: int = 1,
    dtype=np.float32,
) -> tuple[np.ndarray, list[int]]:
    """Stack of 7-plane pairs for an ego trajectory against an instance's
    recorded neighbors.

    ``ego`` holds (s, d, v_s, v_d) rows on the instance's frames starting at
    the anchor. Pairs cover the frames both share, so a planner candidate
    shorter than a long demonstration only reaches its own horizon.
    """
    steps = pair_timesteps(shared_steps(instance, ego), window_s, instance.dt, stride)
    n_a = window_steps(window_s, instance.dt)
    out = np.zeros((len(steps),) + spec.pair_shape, dtype=dtype)
    dims = (instance.ego_length, instance.ego_width)
    for i, t in enumerate(steps):
        anchor = ego[t]
        out[i, :4] = encode_state(instance.neighbors[:, t, :], instance.road, anchor, spec)
        out[i, 4:] = encode_action(ego[t : t + n_a + 1], anchor, spec, *dims)
    return out, steps


def instance_pairs(
    instance: "DemonstrationInstance",
    spec: GridSpec,
    window_s: float = ACTION_WINDOW_S,
    stride: int = 1,
    dtype=np.float32,
) -> tuple[np.ndarray, list[int]]:
    """The demonstration's own state-action pairs."""
    return trajectory_pairs(instance, instance.ego_array, spec, window_s, stride, dtype)


# --- PGM output ---


def _pgm_bytes(plane: np.ndarray) -> bytes:
    plane = np.asarray(plane, dtype=float)
    if not np.isfinite(plane).all():
        raise ValueError("cannot render a plane with non-finite values")
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        pixels = np.rint((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.zeros(plane.shape, dtype=np.uint8)
    h, w = plane.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def render_pgm(image, path) -> list[Path]:
    """Write 8-bit binary PGMs, one per plane.

    A single 2-D plane goes to ``path``; a plane stack writes
    ``<stem>_<index>_<name>.pgm`` next to it, named after PLANE_NAMES when
    the stack has 7 planes.
    """
    if isinstance(image, (StateActionImage, DynamicOgm)):
        image = image.planes if isinstance(image, StateActionImage) else image.channels
    image = np.asarray(image)
    path = Path(path)
    if image.ndim == 2:
        path.write_bytes(_pgm_bytes(image))
        return [path]
    names = PLANE_NAMES if len(image) == len(PLANE_NAMES) else None
    written = []
    for i, plane in enumerate(image):
        label = names[i] if names else f"plane{i}"
        out = path.with_name(f"{path.stem}_{i}_{label}.pgm")
        out.write_bytes(_pgm_bytes(plane))
        written.append(out)
    return written
