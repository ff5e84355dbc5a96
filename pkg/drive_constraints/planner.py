"""Sample-based Frenet planner.

Candidates combine ``lateral_count`` lateral targets (adjacent lane center to
adjacent lane center, shrunk to the ego lane at the road edge) with
``speed_count`` terminal speeds. Each candidate is a quintic lateral profile
(d0, v_d0, 0) -> (target, 0, 0) and a cubic speed profile (v0, 0) ->
(target, 0) over the horizon, so jerk is analytic.

Planning discards every candidate the constraint model flags at any pair
timestep, then returns the cheapest survivor. Equal costs go to the smaller
lateral move, then to the lower candidate index.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from numpy.polynomial import polynomial as P

from .constraint import ConstraintModel, is_constrained
from .dataset import CostSpec, DemonstrationInstance
from .ogm import ACTION_WINDOW_S, GridSpec, trajectory_pairs
from .scene import Pose, RoadSpec, VehicleState, lane_center, lane_of

J_NORM = 10.0  # m/s^3


@dataclass(frozen=True)
class SamplingSpec:
    lateral_count: int = 7
    speed_count: int = 13
    speed_min: float = 0.0
    speed_max: float = 24.0
    horizon: float = 5.0
    dt: float = 0.1

    def __post_init__(self):
        if self.lateral_count < 1 or self.speed_count < 1:
            raise ValueError(
                f"need at least one lateral and one speed sample, got "
                f"{self.lateral_count} x {self.speed_count}"
            )
        if not 0 <= self.speed_min <= self.speed_max:
            raise ValueError("speed range must satisfy 0 <= speed_min <= speed_max")
        if self.horizon <= 0 or self.dt <= 0:
            raise ValueError("horizon and dt must be > 0")

    @property
    def n_candidates(self) -> int:
        return self.lateral_count * self.speed_count

    @property
    def n_poses(self) -> int:
        return round(self.horizon / self.dt) + 1


@dataclass(frozen=True, eq=False)
class CandidateTrajectory:
    target_lateral: float
    target_speed: float
    t: np.ndarray
    s: np.ndarray
    d: np.ndarray
    v_s: np.ndarray
    v_d: np.ndarray
    jerk_profile: np.ndarray  # (n, 2): lateral, longitudinal

    @property
    def ego_array(self) -> np.ndarray:
        """(n, 4) rows of (s, d, v_s, v_d)."""
        return np.column_stack([self.s, self.d, self.v_s, self.v_d])

    @property
    def poses(self) -> tuple[Pose, ...]:
        return tuple(
            Pose(float(s), float(d), float(t), float(vs), float(vd))
            for s, d, t, vs, vd in zip(self.s, self.d, self.t, self.v_s, self.v_d)
        )


@dataclass(frozen=True)
class CandidateRecord:
    index: int
    target_lateral: float
    target_speed: float
    cost: float
    constrained_at: int | None


@dataclass(frozen=True, eq=False)
class Chosen:
    index: int
    candidate: CandidateTrajectory
    cost: float


@dataclass(frozen=True, eq=False)
class PlannerResult:
    chosen: Chosen | None
    feasible_count: int
    records: tuple[CandidateRecord, ...]

    @property
    def no_solution(self) -> bool:
        return self.chosen is None

    @property
    def outcome(self) -> str:
        return "NoSolution" if self.chosen is None else "Chosen"


def sample_targets(spec: SamplingSpec, ego: VehicleState, road: RoadSpec):
    """(target_lateral, target_speed) pairs, lateral-major order."""
    lane = lane_of(road, ego.d)
    lo, hi = max(lane - 1, 0), min(lane + 1, road.lane_count - 1)
    lats = np.linspace(lane_center(road, lo), lane_center(road, hi), spec.lateral_count)
    speeds = np.linspace(spec.speed_min, spec.speed_max, spec.speed_count)
    return [(float(a), float(v)) for a in lats for v in speeds]


def _quintic(x0, v0, a0, x1, v1, a1, T):
    """Coefficients (low order first) of the quintic meeting both boundary
    triples."""
    A = np.array(
        [
            [T**3, T**4, T**5],
            [3 * T**2, 4 * T**3, 5 * T**4],
            [6 * T, 12 * T**2, 20 * T**3],
        ]
    )
    b = np.array(
        [x1 - (x0 + v0 * T + 0.5 * a0 * T**2), v1 - (v0 + a0 * T), a1 - a0]
    )
    return np.concatenate([[x0, v0, 0.5 * a0], np.linalg.solve(A, b)])


def generate_candidate(ego: VehicleState, target, spec: SamplingSpec):
    target_lateral, target_speed = target
    T = spec.horizon
    t = np.arange(spec.n_poses) * spec.dt
    t[-1] = T

    coef = _quintic(ego.d, ego.v_d, 0.0, target_lateral, 0.0, 0.0, T)
    d = P.polyval(t, coef)
    v_d = P.polyval(t, P.polyder(coef))
    j_lat = P.polyval(t, P.polyder(coef, 3))
    d[-1] = target_lateral

    tau = t / T
    dv = target_speed - ego.v_s
    v_s = ego.v_s + dv * (3 * tau**2 - 2 * tau**3)
    v_s[-1] = target_speed
    s = ego.s + ego.v_s * t + dv * T * (tau**3 - 0.5 * tau**4)
    j_lon = dv * (6.0 - 12.0 * tau) / T**2

    return CandidateTrajectory(
        float(target_lateral),
        float(target_speed),
        t,
        s,
        d,
        v_s,
        v_d,
        np.column_stack([j_lat, j_lon]),
    )


def candidate_cost(candidate: CandidateTrajectory, cost_spec: CostSpec, road: RoadSpec):
    w_jerk, w_speed, w_lane = cost_spec.weights
    jerk = np.mean(np.sum(candidate.jerk_profile**2, axis=1)) / J_NORM**2
    speed = ((candidate.v_s[-1] - cost_spec.speed_limit) / cost_spec.speed_limit) ** 2
    lane = ((candidate.d[-1] - cost_spec.target_lane_center) / road.lane_width) ** 2
    return float(w_jerk * jerk + w_speed * speed + w_lane * lane)


def plan(
    instance: DemonstrationInstance,
    model: ConstraintModel | None = None,
    spec: SamplingSpec = SamplingSpec(),
    grid: GridSpec = GridSpec(),
    window_s: float = ACTION_WINDOW_S,
) -> PlannerResult:
    """Solve one instance. ``model=None`` plans without constraints."""
    if instance.horizon < spec.horizon - 1e-9:
        raise ValueError(
            f"instance {instance.id} covers {instance.horizon:.2f} s, shorter "
            f"than the {spec.horizon} s planning horizon"
        )
    if abs(instance.dt - spec.dt) > 1e-12:
        raise ValueError(
            f"instance frame period {instance.dt} s differs from planner dt {spec.dt} s"
        )
    ego = instance.ego_state(0)
    records, candidates = [], []
    for index, target in enumerate(sample_targets(spec, ego, instance.road)):
        cand = generate_candidate(ego, target, spec)
        cost = candidate_cost(cand, instance.cost_spec, instance.road)
        constrained_at = None
        if model is not None:
            pairs, steps = trajectory_pairs(instance, cand.ego_array, grid, window_s)
            flags = is_constrained(model, pairs)
            if flags.any():
                constrained_at = steps[int(np.argmax(flags))]
        candidates.append(cand)
        records.append(CandidateRecord(index, *target, cost, constrained_at))

    feasible = [r for r in records if r.constrained_at is None]
    chosen = None
    if feasible:
        best = min(
            feasible,
            key=lambda r: (r.cost, abs(r.target_lateral - ego.d), r.index),
        )
        chosen = Chosen(best.index, candidates[best.index], best.cost)
    return PlannerResult(chosen, len(feasible), tuple(records))


def trace_frame(result: PlannerResult) -> pd.DataFrame:
    df = pd.DataFrame(
        [
            (r.index, r.target_lateral, r.target_speed, r.cost, r.constrained_at)
            for r in result.records
        ],
        columns=["index", "target_lateral", "target_speed", "cost", "constrained_at"],
    )
    df["constrained_at"] = df["constrained_at"].astype("Int64")
    return df


def write_trace(result: PlannerResult, path) -> Path:
    """Per-candidate CSV: index, target_lateral, target_speed, cost,
    constrained_at (blank when never constrained)."""
    path = Path(path)
    trace_frame(result).to_csv(path, index=False)
    return path


def parallel_map(fn, items, threads: int = 1) -> list:
    """``[fn(x) for x in items]``, on up to ``threads`` worker threads.

    Results keep the input order, so anything aggregated from them does not
    depend on the thread count.
    """
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]
