"""Flat key = value run configuration.

A config file holds one ``key = value`` per line; ``#`` starts a comment and
blank lines are skipped. Every key must appear in SCHEMA, which also gives
its type, default and a one-line description. Command-line flags override
the file, which overrides the defaults; ``CF_SEED`` in the environment
supplies the seed when neither flag nor file sets one.

    # runs/desk.cfg
    grid = desk
    vehicles = 16
    max_epochs = 6
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

from . import dataset, density, inference, planner
from .constraint import BIAS_PRIOR, DECISION_THRESHOLD
from .evaluate import PERTURB_SHIFT
from .neural import LEARNING_RATE
from .ogm import ACTION_WINDOW_S, GRID_PRESETS, GridSpec
from .scene import LANE_WIDTH, ROAD_LENGTH, SPEED_LIMIT

SEED_ENV = "CF_SEED"
DRIVABLE_COUNT = 3  # instances rendered as drivable-region maps
VAE_EPOCHS = 20

# key -> (type, default, help)
SCHEMA: dict[str, tuple[type, object, str]] = {
    "seed": (int, 0, "master seed"),
    "threads": (int, 1, "worker threads for per-instance planning"),
    "grid": (str, "desk", "OGM preset: desk (16x64 @ 1 m) or full (32x128 @ 0.5 m)"),
    # data
    "lanes": (int, 3, "synthetic lane count"),
    "vehicles": (int, 12, "synthetic vehicle count"),
    "duration": (float, 60.0, "synthetic recording length, s"),
    "dt": (float, dataset.DT, "frame period, s"),
    "gap_m": (float, dataset.GAP_M, "synthetic minimum bumper gap G, m"),
    "headway_s": (float, dataset.HEADWAY_S, "synthetic time headway, s"),
    "stride": (int, dataset.STRIDE, "frames between instance anchors"),
    "horizon_s": (float, dataset.HORIZON_S, "instance and planning horizon, s"),
    "lane_width": (float, LANE_WIDTH, "lane width, m"),
    "road_length": (float, ROAD_LENGTH, "initial placement segment, m"),
    "speed_limit": (float, SPEED_LIMIT, "speed limit, m/s"),
    "lane_change_rate": (float, dataset.LANE_CHANGE_RATE, "lane-change attempts per s"),
    "desired_speed_min": (float, dataset.DESIRED_SPEED[0], "slowest desired speed, m/s"),
    "desired_speed_max": (float, dataset.DESIRED_SPEED[1], "fastest desired speed, m/s"),
    # density model
    "backbone": (str, "mlp", "VAE backbone: mlp or conv"),
    "latent_dim": (int, density.LATENT_DIM, "VAE latent size"),
    "hidden": (int, density.HIDDEN, "MLP backbone width"),
    "vae_epochs": (int, VAE_EPOCHS, "VAE training epochs"),
    "vae_batch": (int, density.BATCH_SIZE, "VAE minibatch size"),
    "vae_lr": (float, LEARNING_RATE, "VAE Adam learning rate"),
    "beta_max": (float, density.BETA_MAX, "peak KL weight"),
    "cycle_len": (int, density.CYCLE_LEN, "KL annealing cycle, optimizer steps"),
    "ramp_ratio": (float, density.RAMP_RATIO, "share of a cycle spent ramping beta"),
    "calibration_quantile": (
        float,
        density.CALIBRATION_QUANTILE,
        "quantile of held-out reconstruction errors taken as e_th",
    ),
    "pair_stride": (int, inference.PAIR_STRIDE, "timesteps between encoded pairs"),
    "window_s": (float, ACTION_WINDOW_S, "action window, s"),
    # constraint inference
    "max_epochs": (int, inference.MAX_EPOCHS, "inference epochs"),
    "planner_batch": (int, inference.PLANNER_BATCH, "instances planned per epoch"),
    "steps_per_epoch": (int, inference.STEPS_PER_EPOCH, "optimizer steps per epoch"),
    "convergence_frac": (
        float,
        inference.CONVERGENCE_FRAC,
        "stop once fewer planner pairs than this are newly constrained",
    ),
    "constraint_batch": (int, inference.BATCH_SIZE, "examples per class per step"),
    "constraint_beta": (float, inference.CONSTRAINT_BETA, "KL weight in the constraint loss"),
    "constraint_lr": (float, LEARNING_RATE, "constraint Adam learning rate"),
    "bias_prior": (float, BIAS_PRIOR, "initial constrained probability"),
    "freeze_backbone": (bool, False, "train only the classifier head"),
    "decision_threshold": (float, DECISION_THRESHOLD, "constrained above this probability"),
    # planner
    "lateral_count": (int, 7, "lateral targets"),
    "speed_count": (int, 13, "speed targets"),
    "speed_min": (float, 0.0, "slowest target speed, m/s"),
    "speed_max": (float, 24.0, "fastest target speed, m/s"),
    # evaluation
    "drivable_count": (int, DRIVABLE_COUNT, "drivable-region maps to render"),
    "perturb_shift": (float, PERTURB_SHIFT, "leader gap after the perturbation, m"),
}

# inclusive (low, high); None leaves a side open
_BOUNDS = {
    "threads": (1, None),
    "lanes": (1, None),
    "vehicles": (1, None),
    "duration": (0.0, None),
    "dt": (0.0, None),
    "gap_m": (0.0, None),
    "headway_s": (0.0, None),
    "stride": (1, None),
    "horizon_s": (0.0, None),
    "lane_width": (0.0, None),
    "lane_change_rate": (0.0, None),
    "latent_dim": (1, None),
    "hidden": (1, None),
    "vae_epochs": (1, None),
    "vae_batch": (1, None),
    "cycle_len": (1, None),
    "ramp_ratio": (0.0, 1.0),
    "calibration_quantile": (0.0, 1.0),
    "pair_stride": (1, None),
    "window_s": (0.0, None),
    "max_epochs": (1, None),
    "planner_batch": (1, None),
    "steps_per_epoch": (0, None),
    "convergence_frac": (0.0, 1.0),
    "constraint_batch": (1, None),
    "constraint_beta": (0.0, None),
    "bias_prior": (0.0, 1.0),
    "decision_threshold": (0.0, 1.0),
    "lateral_count": (1, None),
    "speed_count": (1, None),
    "speed_min": (0.0, None),
    "drivable_count": (0, None),
}
_CHOICES = {"grid": tuple(GRID_PRESETS), "backbone": ("mlp", "conv")}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

# keys that do not change any result
_UNHASHED = {"seed", "threads"}


def defaults() -> dict:
    return {key: spec[1] for key, spec in SCHEMA.items()}


def coerce(key: str, value, where: str = ""):
    """Validate one value against SCHEMA; strings are parsed."""
    where = f" ({where})" if where else ""
    if key not in SCHEMA:
        raise ValueError(f"unknown config key {key!r}{where}")
    kind = SCHEMA[key][0]
    try:
        if kind is bool and isinstance(value, str):
            low = value.strip().lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(f"not a boolean: {value!r}")
            out = low in _TRUE
        elif kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(f"not an integer: {value!r}")
        else:
            out = kind(value.strip() if isinstance(value, str) else value)
    except ValueError as exc:
        raise ValueError(f"config key {key!r}{where}: {exc}") from None
    if key in _CHOICES and out not in _CHOICES[key]:
        raise ValueError(f"config key {key!r}{where}: {out!r} not in {_CHOICES[key]}")
    lo, hi = _BOUNDS.get(key, (None, None))
    if (lo is not None and out < lo) or (hi is not None and out > hi):
        raise ValueError(f"config key {key!r}{where}: {out} outside [{lo}, {hi}]")
    return out


def read_kv_file(path) -> dict:
    path = Path(path)
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = coerce(key, value, f"{path}:{lineno}")
    return values


def merge(file_values: dict | None = None, flags: dict | None = None, env=None) -> dict:
    """Resolve every SCHEMA key: flags, then file, then defaults.

    Flags set to None count as not given.
    """
    env = os.environ if env is None else env
    values = defaults()
    if SEED_ENV in env:
        values["seed"] = coerce("seed", env[SEED_ENV], SEED_ENV)
    for key, value in (file_values or {}).items():
        values[key] = coerce(key, value)
    for key, value in (flags or {}).items():
        if value is not None:
            values[key] = coerce(key, value, "command line")
    if values["speed_min"] > values["speed_max"]:
        raise ValueError(
            f"speed_min {values['speed_min']} exceeds speed_max {values['speed_max']}"
        )
    return values


def config_hash(values: dict) -> str:
    """SHA-256 over the sorted ``key=value`` lines of every result-affecting key."""
    lines = [f"{k}={values[k]!r}" for k in sorted(values) if k not in _UNHASHED]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def run_directory(root, values: dict) -> Path:
    return Path(root) / f"seed{values['seed']}-{config_hash(values)[:10]}"


def grid_spec(name: str) -> GridSpec:
    if name not in GRID_PRESETS:
        raise ValueError(f"unknown grid preset {name!r}; choose from {tuple(GRID_PRESETS)}")
    return GRID_PRESETS[name]


# --- typed views ---


def synth_config(values: dict) -> dataset.SynthConfig:
    return dataset.SynthConfig(
        lanes=values["lanes"],
        vehicles=values["vehicles"],
        duration_s=values["duration"],
        dt_s=values["dt"],
        gap_m=values["gap_m"],
        headway_s=values["headway_s"],
        seed=values["seed"],
        stride=values["stride"],
        horizon_s=values["horizon_s"],
        lane_width=values["lane_width"],
        road_length=values["road_length"],
        speed_limit=values["speed_limit"],
        lane_change_rate=values["lane_change_rate"],
        desired_speed_min=values["desired_speed_min"],
        desired_speed_max=values["desired_speed_max"],
    )


def sampling_spec(values: dict) -> planner.SamplingSpec:
    return planner.SamplingSpec(
        lateral_count=values["lateral_count"],
        speed_count=values["speed_count"],
        speed_min=values["speed_min"],
        speed_max=values["speed_max"],
        horizon=values["horizon_s"],
        dt=values["dt"],
    )


def beta_schedule(values: dict) -> density.BetaSchedule:
    return density.BetaSchedule(
        cycle_len=values["cycle_len"],
        ramp_ratio=values["ramp_ratio"],
        beta_max=values["beta_max"],
    )


def inference_config(values: dict, gap_m: float | None = None) -> inference.InferenceConfig:
    return inference.InferenceConfig(
        max_epochs=values["max_epochs"],
        planner_batch=values["planner_batch"],
        steps_per_epoch=values["steps_per_epoch"],
        convergence_new_constrained_frac=values["convergence_frac"],
        seed=values["seed"],
        batch_size=values["constraint_batch"],
        beta=values["constraint_beta"],
        bias_prior=values["bias_prior"],
        learning_rate=values["constraint_lr"],
        pair_stride=values["pair_stride"],
        window_s=values["window_s"],
        freeze_backbone=values["freeze_backbone"],
        threads=values["threads"],
        gap_m=gap_m,
    )
