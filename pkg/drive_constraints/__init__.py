"""Driving constraints learned from demonstrations.

A VAE over ego-centric state-action occupancy grids flags planner outputs
that look unlike expert driving; a classifier trained on those flags becomes
the constraint a sample-based Frenet planner must respect.
"""

from drive_constraints.constraint import (
    ConstraintModel,
    classify,
    drivable_region,
    init_from_vae,
    is_constrained,
)
from drive_constraints.dataset import (
    DemonstrationInstance,
    SynthConfig,
    generate_synthetic,
    ingest_ngsim,
    load_instances,
    save_instances,
)
from drive_constraints.density import (
    DensityThreshold,
    build_vae,
    calibrate_threshold,
    recon_error,
    train_vae,
)
from drive_constraints.evaluate import EvalReport, evaluate, perturbation_study
from drive_constraints.inference import InferenceConfig, run_inference
from drive_constraints.ogm import GRID_PRESETS, GridSpec, encode_action, encode_state
from drive_constraints.planner import SamplingSpec, plan
from drive_constraints.scene import RoadSpec, VehicleState

__all__ = [
    "ConstraintModel",
    "classify",
    "drivable_region",
    "init_from_vae",
    "is_constrained",
    "DemonstrationInstance",
    "SynthConfig",
    "generate_synthetic",
    "ingest_ngsim",
    "load_instances",
    "save_instances",
    "DensityThreshold",
    "build_vae",
    "calibrate_threshold",
    "recon_error",
    "train_vae",
    "EvalReport",
    "evaluate",
    "perturbation_study",
    "InferenceConfig",
    "run_inference",
    "GRID_PRESETS",
    "GridSpec",
    "encode_action",
    "encode_state",
    "SamplingSpec",
    "plan",
    "RoadSpec",
    "VehicleState",
]
