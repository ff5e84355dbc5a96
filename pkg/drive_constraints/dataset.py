"""Demonstration instances: synthetic expert traffic, NGSIM ingestion, replay.

A demonstration instance is one (vehicle, anchor frame) pair: the vehicle's
next T_steps poses are the expert action list, the neighbors recorded over
the same frames are the state list, and the cost spec carries the goal (speed
limit plus the lane the expert ends up in).

Two sources produce the same *track table* (one row per vehicle per frame):

  - ``simulate_traffic``: straight multi-lane road, constant-desired-speed car
    following with a hard gap clamp, Poisson-triggered lane changes that are
    only accepted into gaps >= G. Every pair of vehicles sharing a lane keeps
    a bumper gap >= G for the whole run, which is the latent constraint the
    inference loop must rediscover.
  - ``read_ngsim``: the six NGSIM columns, feet converted to meters.

``slice_instances`` turns either table into instances, so a synthetic table
written with ``write_ngsim_csv`` and re-ingested reproduces the same
instances.

Neighbors follow their recorded tracks whatever the ego does; ``replay_step``
is a function of the frame index only.

    uv run python -m drive_constraints.cli gen-data --out runs/demo
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .scene import (
    LANE_WIDTH,
    ROAD_LENGTH,
    SPEED_LIMIT,
    VEHICLE_LENGTH,
    VEHICLE_WIDTH,
    Pose,
    RoadSpec,
    VehicleState,
    lane_center,
    lane_of,
)

DT = 0.1  # s, NGSIM frame period
HORIZON_S = 5.0  # s, T_steps = 50 at DT
GAP_M = 8.0  # m, ground-truth minimum bumper gap G
HEADWAY_S = 0.8  # s, car-following time headway
STRIDE = 10  # anchor subsampling
FOOT = 0.3048  # m per ft
V_MAX_PLAUSIBLE = 45.0  # m/s, anything faster between frames is a data glitch
ACCEL_MAX = 2.0  # m/s^2, free-road acceleration
LANE_CHANGE_S = 4.0  # s, lateral manoeuvre duration
LANE_CHANGE_RATE = 0.02  # 1/s, Poisson rate of lane-change attempts
DESIRED_SPEED = (12.0, 22.0)  # m/s, uniform range of expert desired speeds
# Half-extents of the OGM coverage (64 m x 16 m for both grid presets).
NEIGHBOR_WINDOW = (32.0, 8.0)

NGSIM_COLUMNS = ("Vehicle_ID", "Frame_ID", "Local_X", "Local_Y", "v_Vel", "Lane_ID")
TRACK_COLUMNS = ("vehicle", "frame", "s", "d", "v_s", "v_d", "length", "width")

CACHE_FORMAT = "drive-constraints-instances"
CACHE_VERSION = 1
CACHE_FIELDS = (
    "id",
    "anchor_frame",
    "split",
    "dt",
    "road",
    "cost",
    "ego",
    "ego_track",
    "neighbor_ids",
    "neighbors",
)

_WARNED: set[str] = set()


def _warn_once(key, message):
    if key in _WARNED:
        return
    _WARNED.add(key)
    warnings.warn(message, stacklevel=3)


def reset_dataset_warnings():
    """Forget which data-quality warnings were already emitted (for tests)."""
    _WARNED.clear()


# --- types ---


@dataclass(frozen=True)
class CostSpec:
    speed_limit: float = SPEED_LIMIT
    target_lane_center: float = 0.5 * LANE_WIDTH
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # jerk, speed, lane

    def __post_init__(self):
        if self.speed_limit <= 0:
            raise ValueError(f"speed_limit must be > 0, got {self.speed_limit}")
        if len(self.weights) != 3 or min(self.weights) < 0:
            raise ValueError(
                f"weights must be three non-negative numbers, got {self.weights}"
            )


@dataclass(frozen=True, eq=False)
class ReplayWorld:
    """Recorded neighbor snapshots.

    ``frames`` has shape (T, n, 6) in the frame-array layout
    (s, d, v_s, v_d, length, width); frame index ``first_frame + k`` maps to
    ``frames[k]``.
    """

    frames: np.ndarray
    dt: float = DT
    first_frame: int = 0
    road: RoadSpec = field(default_factory=RoadSpec)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"frame period must be > 0, got {self.dt}")
        if self.frames.ndim != 3 or self.frames.shape[2] != 6:
            raise ValueError(
                f"frames must have shape (T, n, 6), got {self.frames.shape}"
            )
        self.frames.setflags(write=False)

    @property
    def frame_range(self) -> range:
        return range(self.first_frame, self.first_frame + len(self.frames))

    def frame_array(self, t: int) -> np.ndarray:
        """Snapshot at absolute frame ``t`` as an (n, 6) array."""
        if t not in self.frame_range:
            raise ValueError(
                f"frame {t} outside recorded range "
                f"[{self.first_frame}, {self.first_frame + len(self.frames) - 1}]"
            )
        return self.frames[t - self.first_frame]


@dataclass(frozen=True, eq=False)
class DemonstrationInstance:
    id: str
    anchor_frame: int
    ego_track: tuple[Pose, ...]
    neighbors: np.ndarray  # (n, T_steps, 6)
    cost_spec: CostSpec
    road: RoadSpec
    ego_id: int = 0
    neighbor_ids: tuple[int, ...] = ()
    ego_length: float = VEHICLE_LENGTH
    ego_width: float = VEHICLE_WIDTH
    dt: float = DT
    split: str = ""

    def __post_init__(self):
        n_steps = len(self.ego_track)
        if n_steps < 1:
            raise ValueError(f"instance {self.id}: empty ego track")
        if self.neighbors.ndim != 3 or self.neighbors.shape[1:] != (n_steps, 6):
            raise ValueError(
                f"instance {self.id}: neighbor tracks have shape "
                f"{self.neighbors.shape}, expected (n, {n_steps}, 6)"
            )
        ego = self.ego_array
        if n_steps > 1:
            fastest = float(np.abs(np.diff(ego[:, 0])).max()) / self.dt
            if fastest > V_MAX_PLAUSIBLE:
                raise ValueError(
                    f"instance {self.id}: ego moves {fastest:.1f} m/s between "
                    f"frames (> {V_MAX_PLAUSIBLE} m/s)"
                )
        self.neighbors.setflags(write=False)

    @property
    def t_steps(self) -> int:
        return len(self.ego_track)

    @property
    def horizon(self) -> float:
        return self.t_steps * self.dt

    @property
    def ego_array(self) -> np.ndarray:
        """(T_steps, 4) array of (s, d, v_s, v_d)."""
        return np.array([(p.s, p.d, p.v_s, p.v_d) for p in self.ego_track])

    def ego_state(self, k: int = 0) -> VehicleState:
        p = self.ego_track[k]
        return VehicleState(
            p.s,
            p.d,
            p.v_s,
            p.v_d,
            self.ego_length,
            self.ego_width,
            lane_of(self.road, p.d),
        )

    @property
    def neighbor_tracks(self) -> tuple[tuple[VehicleState, ...], ...]:
        return tuple(
            tuple(_state(row, self.road) for row in track) for track in self.neighbors
        )

    @property
    def world(self) -> ReplayWorld:
        return ReplayWorld(
            np.ascontiguousarray(self.neighbors.transpose(1, 0, 2)),
            self.dt,
            self.anchor_frame,
            self.road,
        )


def _state(row, road) -> VehicleState:
    s, d, v_s, v_d, length, width = (float(x) for x in row)
    return VehicleState(s, d, v_s, v_d, length, width, lane_of(road, d))


def replay_step(world: ReplayWorld, t: int) -> tuple[VehicleState, ...]:
    """Recorded neighbor states at absolute frame ``t``."""
    return tuple(_state(row, world.road) for row in world.frame_array(t))


# --- synthetic traffic ---


@dataclass(frozen=True)
class SynthConfig:
    lanes: int = 3
    vehicles: int = 12
    duration_s: float = 60.0
    dt_s: float = DT
    gap_m: float = GAP_M
    headway_s: float = HEADWAY_S
    seed: int = 0
    stride: int = STRIDE
    horizon_s: float = HORIZON_S
    lane_width: float = LANE_WIDTH
    road_length: float = ROAD_LENGTH
    speed_limit: float = SPEED_LIMIT
    lane_change_rate: float = LANE_CHANGE_RATE
    desired_speed_min: float = DESIRED_SPEED[0]
    desired_speed_max: float = DESIRED_SPEED[1]

    def __post_init__(self):
        if self.lanes < 1 or self.vehicles < 1:
            raise ValueError(
                f"need >= 1 lane and >= 1 vehicle, got lanes={self.lanes} "
                f"vehicles={self.vehicles}"
            )
        if self.dt_s <= 0 or self.duration_s <= 0 or self.horizon_s <= 0:
            raise ValueError("dt_s, duration_s and horizon_s must be > 0")
        if self.gap_m < 0 or self.headway_s <= 0:
            raise ValueError(
                f"gap_m must be >= 0 and headway_s > 0, got {self.gap_m}, "
                f"{self.headway_s}"
            )
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if not 0 < self.desired_speed_min <= self.desired_speed_max:
            raise ValueError("desired speed range must satisfy 0 < min <= max")

    @property
    def road(self) -> RoadSpec:
        return RoadSpec(self.lanes, self.lane_width, self.road_length, self.speed_limit)

    @property
    def t_steps(self) -> int:
        return round(self.horizon_s / self.dt_s)

    @classmethod
    def from_mapping(cls, values: dict) -> "SynthConfig":
        """Build from a flat mapping, ignoring keys that are not fields."""
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})


def _blend(tau):
    """Quintic smooth step and its derivative (zero slope at both ends)."""
    pos = tau**3 * (10 - 15 * tau + 6 * tau**2)
    vel = 30 * tau**2 * (1 - tau) ** 2
    return pos, vel


def simulate_traffic(config: SynthConfig, seed: int | None = None) -> pd.DataFrame:
    """Run the synthetic expert traffic and return the track table.

    Frames 1 .. N-1 are recorded (N = duration / dt): the placement frame is
    not a product of the dynamics and is dropped.
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    road = config.road
    n, lanes = config.vehicles, config.lanes
    length, gap, tau_h, dt = VEHICLE_LENGTH, config.gap_m, config.headway_s, config.dt_s

    per_lane = math.ceil(n / lanes)
    if per_lane * (length + gap) > config.road_length:
        raise ValueError(
            f"infeasible density: {per_lane} vehicles per lane need "
            f"{per_lane * (length + gap):.1f} m to keep the minimum gap "
            f"G={gap} m, but the road segment is {config.road_length} m long"
        )
    spacing = config.road_length / per_lane

    lane = np.arange(n) % lanes
    slot = np.arange(n) // lanes
    s = slot * spacing + rng.uniform(0.0, spacing - length - gap, size=n)
    d = (lane + 0.5) * config.lane_width
    v_des = rng.uniform(config.desired_speed_min, config.desired_speed_max, size=n)
    v = v_des.copy()
    v_d = np.zeros(n)
    target = np.full(n, -1)  # lane being changed into, -1 while lane keeping
    lc_start = np.zeros(n)
    lc_from = np.zeros(n)
    p_change = 1.0 - math.exp(-config.lane_change_rate * dt)

    def occupied(i):
        return {int(lane[i])} if target[i] < 0 else {int(lane[i]), int(target[i])}

    n_steps = round(config.duration_s / dt)
    rows = []
    for k in range(1, n_steps):
        t = k * dt
        draws = rng.random(n)
        sides = rng.random(n)
        for i in range(n):
            if target[i] >= 0 or draws[i] >= p_change:
                continue
            options = [x for x in (lane[i] - 1, lane[i] + 1) if 0 <= x < lanes]
            if not options:
                continue
            new = int(options[int(sides[i] * len(options))])
            clear = all(
                abs(s[j] - s[i]) - length >= gap
                for j in range(n)
                if j != i and new in occupied(j)
            )
            if clear:
                target[i] = new
                lc_start[i] = t
                lc_from[i] = d[i]

        s_new = s.copy()
        order = np.argsort(-s, kind="stable")
        for rank, i in enumerate(order):
            mine = occupied(i)
            ahead = [j for j in order[:rank] if mine & occupied(j)]
            v_next = min(v_des[i], v[i] + ACCEL_MAX * dt)
            if ahead:
                nearest = min(ahead, key=lambda j: s[j])
                follow = (s[nearest] - s[i] - length - gap) / tau_h
                v_next = min(v_next, max(follow, 0.0))
                cap = min((s_new[j] - length - gap - s[i]) / dt for j in ahead)
                v_next = min(v_next, cap)
            v[i] = max(v_next, 0.0)
            s_new[i] = s[i] + v[i] * dt
        s = s_new

        for i in range(n):
            if target[i] < 0:
                continue
            tau = min((t - lc_start[i]) / LANE_CHANGE_S, 1.0)
            goal = (target[i] + 0.5) * config.lane_width
            pos, vel = _blend(tau)
            d[i] = lc_from[i] + (goal - lc_from[i]) * pos
            v_d[i] = (goal - lc_from[i]) * vel / LANE_CHANGE_S
            if tau >= 1.0:
                lane[i], target[i], d[i], v_d[i] = target[i], -1, goal, 0.0

        for i in range(n):
            rows.append((i, k, s[i], d[i], v[i], v_d[i], length, VEHICLE_WIDTH))

    return pd.DataFrame(rows, columns=list(TRACK_COLUMNS))


def generate_synthetic(config: SynthConfig, seed: int | None = None):
    """Synthetic demonstration instances, deterministic given the seed."""
    table = simulate_traffic(config, seed)
    return slice_instances(
        table,
        config.road,
        config.t_steps,
        config.stride,
        dt=config.dt_s,
    )


# --- NGSIM CSV ---


def write_ngsim_csv(table: pd.DataFrame, path, lane_width: float = LANE_WIDTH) -> Path:
    """Write a track table in the NGSIM six-column layout (feet units).

    Lane_ID is 1-based as in NGSIM; ingestion re-derives lanes from Local_X.
    """
    path = Path(path)
    out = pd.DataFrame(
        {
            "Vehicle_ID": table["vehicle"].astype(int),
            "Frame_ID": table["frame"].astype(int),
            "Local_X": table["d"] / FOOT,
            "Local_Y": table["s"] / FOOT,
            "v_Vel": table["v_s"] / FOOT,
            "Lane_ID": (table["d"] // lane_width).astype(int) + 1,
        }
    )
    out.to_csv(path, index=False)
    return path


def read_ngsim(path, dt: float = DT) -> pd.DataFrame:
    """Load an NGSIM CSV into a track table in meters."""
    raw = pd.read_csv(path)
    missing = [c for c in NGSIM_COLUMNS if c not in raw.columns]
    if missing:
        raise ValueError(
            f"{path}: missing NGSIM column(s) {missing}; "
            f"expected header {','.join(NGSIM_COLUMNS)}"
        )
    steps = raw.groupby("Vehicle_ID", sort=False)["Frame_ID"].diff()
    bad = raw.loc[steps <= 0, "Vehicle_ID"].unique()
    if len(bad):
        raise ValueError(
            f"{path}: Frame_ID not strictly increasing for vehicle(s) "
            f"{sorted(int(x) for x in bad)[:10]}"
        )
    if (steps > 1).any():
        _warn_once(
            f"gaps:{path}",
            f"{path}: some vehicles skip frames; anchors spanning a gap are "
            "not eligible",
        )
    table = pd.DataFrame(
        {
            "vehicle": raw["Vehicle_ID"].astype(int),
            "frame": raw["Frame_ID"].astype(int),
            "s": raw["Local_Y"] * FOOT,
            "d": raw["Local_X"] * FOOT,
            "v_s": raw["v_Vel"] * FOOT,
        }
    )
    # Lateral speed by forward difference; the last frame repeats the previous.
    nxt = table.groupby("vehicle", sort=False)["d"].shift(-1)
    gap = table.groupby("vehicle", sort=False)["frame"].shift(-1) - table["frame"]
    table["v_d"] = ((nxt - table["d"]) / (gap * dt)).groupby(
        table["vehicle"], sort=False
    ).ffill().fillna(0.0)
    table["length"] = (
        raw["v_Length"] * FOOT if "v_Length" in raw.columns else VEHICLE_LENGTH
    )
    table["width"] = raw["v_Width"] * FOOT if "v_Width" in raw.columns else VEHICLE_WIDTH
    return table


def ingest_ngsim(
    path,
    road: RoadSpec,
    T_steps: int = 50,
    stride: int = STRIDE,
    dt: float = DT,
):
    """Demonstration instances from an NGSIM-format CSV."""
    return slice_instances(read_ngsim(path, dt), road, T_steps, stride, dt=dt)


# --- slicing ---


def slice_instances(
    table: pd.DataFrame,
    road: RoadSpec,
    T_steps: int,
    stride: int = STRIDE,
    dt: float = DT,
    window: tuple[float, float] = NEIGHBOR_WINDOW,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
):
    """One instance per (vehicle, anchor frame) with T_steps recorded frames.

    Anchors step by ``stride`` through each vehicle's frame list; an anchor is
    eligible when the vehicle is recorded on every one of the T_steps frames
    starting there. Neighbors are the vehicles inside ``window`` (longitudinal,
    lateral half-extents) around the ego at the anchor.
    """
    if T_steps < 1 or stride < 1:
        raise ValueError(f"T_steps and stride must be >= 1, got {T_steps}, {stride}")
    table = table.sort_values(["vehicle", "frame"], kind="stable")
    cols = ["s", "d", "v_s", "v_d", "length", "width"]
    tracks = {
        int(vid): (g["frame"].to_numpy(dtype=np.int64), g[cols].to_numpy(dtype=float))
        for vid, g in table.groupby("vehicle", sort=True)
    }
    by_frame = {
        int(f): g["vehicle"].to_numpy(dtype=np.int64)
        for f, g in table.groupby("frame", sort=True)
    }
    half_s, half_d = window

    instances = []
    for vid, (frames, states) in tracks.items():
        for i in range(0, len(frames) - T_steps + 1, stride):
            f0 = int(frames[i])
            if frames[i + T_steps - 1] - f0 != T_steps - 1:
                continue
            ego = states[i : i + T_steps]
            ids, nb = [], []
            for other in by_frame[f0]:
                if other == vid:
                    continue
                o_frames, o_states = tracks[int(other)]
                j = int(np.searchsorted(o_frames, f0))
                row = o_states[j]
                if abs(row[0] - ego[0, 0]) > half_s or abs(row[1] - ego[0, 1]) > half_d:
                    continue
                ids.append(int(other))
                nb.append(_track_over(o_frames, o_states, f0, T_steps, dt))
            neighbors = np.array(nb, dtype=float).reshape(len(nb), T_steps, 6)
            poses = tuple(
                Pose(float(r[0]), float(r[1]), k * dt, float(r[2]), float(r[3]))
                for k, r in enumerate(ego)
            )
            goal_lane = lane_of(road, float(ego[-1, 1]))
            instances.append(
                DemonstrationInstance(
                    id=f"v{vid}-f{f0}",
                    anchor_frame=f0,
                    ego_track=poses,
                    neighbors=neighbors,
                    cost_spec=CostSpec(
                        road.speed_limit, lane_center(road, goal_lane), weights
                    ),
                    road=road,
                    ego_id=vid,
                    neighbor_ids=tuple(ids),
                    ego_length=float(ego[0, 4]),
                    ego_width=float(ego[0, 5]),
                    dt=dt,
                )
            )
    return instances


def _track_over(frames, states, f0, T_steps, dt):
    """States on frames f0 .. f0+T_steps-1, constant-velocity filled."""
    j0 = int(np.searchsorted(frames, f0))
    if j0 + T_steps <= len(frames) and frames[j0 + T_steps - 1] - f0 == T_steps - 1:
        return states[j0 : j0 + T_steps]
    out = np.empty((T_steps, 6))
    last = None
    for k in range(T_steps):
        j = int(np.searchsorted(frames, f0 + k))
        if j < len(frames) and frames[j] == f0 + k:
            out[k] = states[j]
            last = (f0 + k, states[j])
            continue
        _warn_once(
            "extrapolated",
            "neighbor tracks end inside the horizon; missing frames are "
            "extrapolated at constant velocity",
        )
        f_last, row = last
        lag = (f0 + k - f_last) * dt
        out[k] = row
        out[k, 0] = row[0] + row[2] * lag
        out[k, 1] = row[1] + row[3] * lag
    return out


def assign_splits(instances, seed: int, fractions=(0.6, 0.2, 0.2)):
    """Tag instances train / calib / eval by ego vehicle (seeded).

    Splitting by vehicle keeps near-duplicate neighbouring anchors of one
    vehicle on the same side.
    """
    ids = sorted({inst.ego_id for inst in instances})
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train = max(1, round(fractions[0] * len(ids)))
    n_calib = max(1, round(fractions[1] * len(ids))) if len(ids) > 2 else 0
    tag = {}
    for rank, idx in enumerate(perm):
        tag[ids[idx]] = (
            "train"
            if rank < n_train
            else "calib"
            if rank < n_train + n_calib
            else "eval"
        )
    return [replace(inst, split=tag[inst.ego_id]) for inst in instances]


def select_split(instances, split: str):
    return [inst for inst in instances if inst.split == split]


# --- cache ---


def _record(inst: DemonstrationInstance) -> dict:
    return {
        "id": inst.id,
        "anchor_frame": inst.anchor_frame,
        "split": inst.split,
        "dt": inst.dt,
        "road": [
            inst.road.lane_count,
            inst.road.lane_width,
            inst.road.length,
            inst.road.speed_limit,
        ],
        "cost": [
            inst.cost_spec.speed_limit,
            inst.cost_spec.target_lane_center,
            list(inst.cost_spec.weights),
        ],
        "ego": [inst.ego_id, inst.ego_length, inst.ego_width],
        "ego_track": [[p.s, p.d, p.t, p.v_s, p.v_d] for p in inst.ego_track],
        "neighbor_ids": list(inst.neighbor_ids),
        "neighbors": inst.neighbors.tolist(),
    }


def _from_record(rec: dict) -> DemonstrationInstance:
    lane_count, lane_width, length, speed_limit = rec["road"]
    limit, center, weights = rec["cost"]
    ego_id, ego_length, ego_width = rec["ego"]
    t_steps = len(rec["ego_track"])
    return DemonstrationInstance(
        id=rec["id"],
        anchor_frame=int(rec["anchor_frame"]),
        ego_track=tuple(Pose(*p) for p in rec["ego_track"]),
        neighbors=np.array(rec["neighbors"], dtype=float).reshape(-1, t_steps, 6),
        cost_spec=CostSpec(limit, center, tuple(weights)),
        road=RoadSpec(int(lane_count), lane_width, length, speed_limit),
        ego_id=int(ego_id),
        neighbor_ids=tuple(int(x) for x in rec["neighbor_ids"]),
        ego_length=ego_length,
        ego_width=ego_width,
        dt=rec["dt"],
        split=rec["split"],
    )


def save_instances(instances, path) -> Path:
    """Write instances as JSON lines, header record first.

    Record fields, in order: id, anchor_frame, split, dt,
    road [lane_count, lane_width, length, speed_limit],
    cost [speed_limit, target_lane_center, weights],
    ego [vehicle id, length, width], ego_track [[s, d, t, v_s, v_d], ...],
    neighbor_ids, neighbors [[[s, d, v_s, v_d, length, width], ...], ...].
    """
    path = Path(path)
    header = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "count": len(instances),
        "fields": list(CACHE_FIELDS),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for inst in instances:
            fh.write(json.dumps(_record(inst)) + "\n")
    return path


def load_instances(path):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CACHE_FORMAT:
            raise ValueError(f"{path}: not a {CACHE_FORMAT} cache")
        if header.get("version") != CACHE_VERSION:
            raise ValueError(
                f"{path}: cache version {header.get('version')} unsupported "
                f"(expected {CACHE_VERSION})"
            )
        instances = [_from_record(json.loads(line)) for line in fh if line.strip()]
    if len(instances) != header.get("count", len(instances)):
        raise ValueError(
            f"{path}: header announces {header['count']} instances, "
            f"found {len(instances)}"
        )
    return instances
