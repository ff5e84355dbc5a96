"""Single-horizon evaluation of the planner, plus the figures around it.

Each evaluation instance is planned once. A chosen trajectory is rolled
against the recorded neighbors: a collision is any footprint overlap on any
frame, out-of-road is any footprint edge outside [0, lane_count *
lane_width]. Instances without a solution are counted on their own and left
out of the collision and out-of-road denominators.

The perturbation study pulls the leader of each demonstration pair to
``shift`` meters ahead of the ego and compares reconstruction errors against
the untouched pairs. Near-collision pairs should reconstruct worse.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import matplotlib
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .constraint import ConstraintModel
from .density import VaeModel, encode_mean, recon_error
from .neural import forward
from .ogm import (
    ACTION_WINDOW_S,
    GridSpec,
    encode_state,
    instance_pairs,
    render_pgm,
    shared_steps,
)
from .planner import SamplingSpec, parallel_map, plan
from .scene import leader_gap, leader_index, overlaps_any

REPORT_COLUMNS = ("Collision %", "Out of road %", "No MoP solution %")
PERTURB_SHIFT = 2.0  # m
PERTURB_STRIDE = 5  # timesteps between scored pairs

_WARNED: set[str] = set()

# Agg rasterises the same figure to the same bytes; without the Software tag
# PNGs carry no version or timestamp metadata either
matplotlib.use("Agg")
_PNG_OPTIONS = {"dpi": 150, "metadata": {"Software": None}}


def reset_evaluate_warnings():
    _WARNED.clear()


@dataclass(frozen=True)
class EvalReport:
    n_instances: int
    collision_count: int
    out_of_road_count: int
    no_solution_count: int
    baseline: "EvalReport | None" = None
    label: str = "constrained"

    def __post_init__(self):
        solved = self.n_instances - self.no_solution_count
        if min(self.collision_count, self.out_of_road_count, self.no_solution_count) < 0:
            raise ValueError("report counts must be non-negative")
        if solved < 0 or self.collision_count > solved or self.out_of_road_count > solved:
            raise ValueError(
                f"inconsistent counts: {self.n_instances} instances, "
                f"{self.no_solution_count} without solution, "
                f"{self.collision_count} collisions, {self.out_of_road_count} off road"
            )

    @property
    def solved(self) -> int:
        return self.n_instances - self.no_solution_count

    @property
    def collision_pct(self) -> float:
        return 100.0 * self.collision_count / self.solved if self.solved else 0.0

    @property
    def out_of_road_pct(self) -> float:
        return 100.0 * self.out_of_road_count / self.solved if self.solved else 0.0

    @property
    def no_solution_pct(self) -> float:
        if not self.n_instances:
            return 0.0
        return 100.0 * self.no_solution_count / self.n_instances

    @property
    def percentages(self) -> tuple[float, float, float]:
        return self.collision_pct, self.out_of_road_pct, self.no_solution_pct


# --- rollouts ---


def _rows(instance, ego: np.ndarray) -> np.ndarray:
    n = shared_steps(instance, ego)
    dims = np.tile([instance.ego_length, instance.ego_width], (n, 1))
    return np.hstack([ego[:n, :4], dims])


def rollout(instance, ego: np.ndarray) -> tuple[bool, bool]:
    """(collided, left the road) for ego rows (s, d, v_s, v_d) on the
    instance's frames."""
    rows = _rows(instance, ego)
    lo, hi = instance.road.lateral_bounds
    half_w = 0.5 * instance.ego_width
    off_road = bool(np.any(rows[:, 1] - half_w < lo) or np.any(rows[:, 1] + half_w > hi))
    collided = any(
        overlaps_any(rows[k], instance.neighbors[:, k, :]) for k in range(len(rows))
    )
    return collided, off_road


def min_leader_gap(instance, ego: np.ndarray) -> float:
    """Smallest bumper gap to a laterally overlapping vehicle ahead."""
    rows = _rows(instance, ego)
    return min(
        (leader_gap(rows[k], instance.neighbors[:, k, :]) for k in range(len(rows))),
        default=math.inf,
    )


def evaluate(
    instances,
    model: ConstraintModel | None,
    planner_spec: SamplingSpec = SamplingSpec(),
    grid: GridSpec = GridSpec(),
    window_s: float = ACTION_WINDOW_S,
    baseline: bool = True,
    threads: int = 1,
    verbose: bool = False,
) -> EvalReport:
    """Plan every instance once and count failures.

    With a model and ``baseline=True`` the unconstrained planner is scored on
    the same instances and attached as ``report.baseline``.
    """
    leaked = [inst.id for inst in instances if inst.split == "train"]
    if leaked:
        raise ValueError(
            f"{len(leaked)} evaluation instance(s) are tagged 'train', "
            f"e.g. {leaked[0]}"
        )

    def one(inst):
        result = plan(inst, model, planner_spec, grid, window_s)
        if result.no_solution:
            return True, False, False
        return (False, *rollout(inst, result.chosen.candidate.ego_array))

    outcomes = parallel_map(one, instances, threads)
    report = EvalReport(
        n_instances=len(instances),
        collision_count=sum(c for _, c, _ in outcomes),
        out_of_road_count=sum(o for _, _, o in outcomes),
        no_solution_count=sum(ns for ns, _, _ in outcomes),
        label="constrained" if model is not None else "unconstrained",
    )
    if verbose:
        c, o, ns = report.percentages
        print(
            f"  {report.label:13}  collision {c:5.1f}%  out of road {o:5.1f}%  "
            f"no solution {ns:5.1f}%  ({report.n_instances} instances)"
        )
    if model is not None and baseline:
        base = evaluate(
            instances, None, planner_spec, grid, window_s, False, threads, verbose
        )
        report = EvalReport(
            report.n_instances,
            report.collision_count,
            report.out_of_road_count,
            report.no_solution_count,
            base,
            report.label,
        )
    return report


# --- perturbation study ---


@dataclass(frozen=True)
class PerturbationResult:
    mean_error_in: float
    mean_error_perturbed: float
    used: int
    skipped: int

    @property
    def ratio(self) -> float:
        return self.mean_error_perturbed / self.mean_error_in


def _pull_leader(instance, image, ego_row, t, shift, grid):
    """``image`` with the leader at step t moved back to ``shift`` meters
    ahead of the ego's bumper, or None without a leader."""
    frame = instance.neighbors[:, t, :]
    lead = leader_index(ego_row, frame)
    if lead is None:
        return None
    moved = frame.copy()
    gap = moved[lead, 0] - ego_row[0] - 0.5 * (moved[lead, 4] + ego_row[4])
    if gap > shift:
        moved[lead, 0] -= gap - shift
    state = encode_state(moved, instance.road, ego_row, grid)
    return np.concatenate([state.astype(image.dtype), image[4:]])


def perturbation_study(
    vae: VaeModel,
    demos,
    shift: float = PERTURB_SHIFT,
    grid: GridSpec = GridSpec(),
    window_s: float = ACTION_WINDOW_S,
    stride: int = PERTURB_STRIDE,
) -> PerturbationResult:
    """Mean reconstruction error of demonstration pairs, as recorded and with
    the ego's leader pulled back to ``shift`` meters ahead of its bumper.

    Only the leader moves; the rest of the recorded scene and the ego's action
    stay put. Instances only carry the neighbors that were inside the grid at
    the anchor, so translating the ego instead would empty part of the window.
    Leaders already closer than ``shift`` are left where they are. Pairs
    (every ``stride``-th timestep) without a leader are skipped and counted.
    """
    err_in, err_out = [], []
    skipped = 0
    for inst in demos:
        images, steps = instance_pairs(inst, grid, window_s, stride)
        rows = _rows(inst, inst.ego_array)
        kept, moved = [], []
        for image, t in zip(images, steps):
            pulled = _pull_leader(inst, image, rows[t], t, shift, grid)
            if pulled is None:
                skipped += 1
                continue
            kept.append(image)
            moved.append(pulled)
        if kept:
            err_in.append(recon_error(vae, np.stack(kept)))
            err_out.append(recon_error(vae, np.stack(moved)))
    if skipped and "no_leader" not in _WARNED:
        _WARNED.add("no_leader")
        warnings.warn(
            f"perturbation study skipped {skipped} pair(s) without a leader in "
            "front of the ego",
            stacklevel=2,
        )
    if not err_in:
        raise ValueError("no demonstration has a leader to perturb against")
    err_in, err_out = np.concatenate(err_in), np.concatenate(err_out)
    return PerturbationResult(
        float(np.mean(err_in)), float(np.mean(err_out)), len(err_in), skipped
    )


# --- rendering ---


def _save(fig, path) -> Path:
    fig.tight_layout()
    fig.savefig(path, **_PNG_OPTIONS)
    plt.close(fig)
    return Path(path)


def report_frame(report: EvalReport) -> pd.DataFrame:
    rows = []
    for rep in (report, report.baseline):
        if rep is None:
            continue
        rows.append(
            {
                "label": rep.label,
                "n_instances": rep.n_instances,
                "collision_pct": rep.collision_pct,
                "out_of_road_pct": rep.out_of_road_pct,
                "no_solution_pct": rep.no_solution_pct,
                "collision_count": rep.collision_count,
                "out_of_road_count": rep.out_of_road_count,
                "no_solution_count": rep.no_solution_count,
            }
        )
    return pd.DataFrame(rows)


def format_report(report: EvalReport) -> str:
    """Aligned text table, columns in the order of REPORT_COLUMNS."""
    head = f"{'':14}| " + " | ".join(REPORT_COLUMNS)
    widths = [len(c) for c in REPORT_COLUMNS]

    def line(name, values):
        cells = [f"{v:>{w}.2f}" for v, w in zip(values, widths)]
        return f"{name:14}| " + " | ".join(cells)

    lines = [head, "-" * len(head), line(report.label, report.percentages)]
    if report.baseline is not None:
        base = report.baseline
        delta = [a - b for a, b in zip(report.percentages, base.percentages)]
        lines.append(line(base.label, base.percentages))
        lines.append(line("delta", delta))
    lines.append("")
    lines.append(
        f"{report.n_instances} instances, {report.no_solution_count} without a "
        f"solution (excluded from collision and out-of-road denominators)"
    )
    return "\n".join(lines) + "\n"


def plot_report(report: EvalReport, path) -> Path:
    path = Path(path)
    reps = [r for r in (report, report.baseline) if r is not None]
    x = np.arange(len(REPORT_COLUMNS))
    width = 0.8 / len(reps)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for i, rep in enumerate(reps):
        ax.bar(x + i * width, rep.percentages, width, label=rep.label)
    ax.set_xticks(x + 0.5 * width * (len(reps) - 1))
    ax.set_xticklabels(REPORT_COLUMNS)
    ax.set_ylabel("% of instances")
    ax.set_title(f"Single-horizon planner evaluation ({report.n_instances} instances)")
    ax.legend(loc="best")
    return _save(fig, path)


def plot_drivable(mask, long_offsets, lat_offsets, path, title="") -> Path:
    """Drivable region over offsets: light = drivable, dark = constrained."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4, 8))
    ax.imshow(
        mask.astype(float),
        origin="lower",
        cmap="gray",
        vmin=0,
        vmax=1,
        aspect="auto",
        extent=(
            float(lat_offsets[0]),
            float(lat_offsets[-1]),
            float(long_offsets[0]),
            float(long_offsets[-1]),
        ),
    )
    ax.plot(0, 0, marker="^", color="tab:red")
    ax.set_xlabel("lateral offset (m)")
    ax.set_ylabel("longitudinal offset (m)")
    ax.set_title(title or "Drivable region")
    return _save(fig, path)


def render_report(report: EvalReport, out_dir, drivable=None) -> list[Path]:
    """Write eval_report.txt, eval_report.csv, eval_report.png and one
    drivable-region PGM per entry of ``drivable`` ({name: mask})."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = out_dir / "eval_report.txt"
    text.write_text(format_report(report), encoding="utf-8")
    csv = out_dir / "eval_report.csv"
    report_frame(report).to_csv(csv, index=False)
    written = [text, csv, plot_report(report, out_dir / "eval_report.png")]
    for name, mask in sorted((drivable or {}).items()):
        written += render_pgm(np.asarray(mask, dtype=float), out_dir / f"drivable_{name}.pgm")
    return written


def render_reconstruction(vae: VaeModel, image: np.ndarray, out_dir, name="pair"):
    """Occupancy planes of a pair next to their VAE reconstruction, as PGMs
    and one PNG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    recon, _ = forward(vae.decoder, encode_mean(vae, image))
    recon = recon[0]
    written = render_pgm(image, out_dir / f"{name}_input.pgm")
    written += render_pgm(recon, out_dir / f"{name}_recon.pgm")
    error = recon_error(vae, image)
    fig, axes = plt.subplots(2, 2, figsize=(6, 8))
    for col, (plane, label) in enumerate(((0, "state occupancy"), (4, "action occupancy"))):
        axes[0, col].imshow(image[plane], origin="lower", cmap="gray", vmin=0, vmax=1)
        axes[0, col].set_title(f"input: {label}", fontsize=9)
        axes[1, col].imshow(recon[plane], origin="lower", cmap="gray", vmin=0, vmax=1)
        axes[1, col].set_title(f"reconstruction: {label}", fontsize=9)
        for row in range(2):
            axes[row, col].set_xticks([])
            axes[row, col].set_yticks([])
    fig.suptitle(f"reconstruction RMSE {error:.4f}")
    return written + [_save(fig, out_dir / f"{name}_recon.png")]
