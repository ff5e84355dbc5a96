"""Constraint inference loop.

Each epoch:

  1. sample ``planner_batch`` training instances;
  2. plan each with the current constraint model;
  3. label the demonstration pairs unconstrained, and the chosen
     trajectory's pairs constrained when the VAE finds them low-density
     (reconstruction error above e_th); other planner pairs get no label;
  4. take ``steps_per_epoch`` optimizer steps on the constraint loss, demo
     pairs from this epoch against every planner pair labelled so far, each
     class weighted by its own batch mean.

The loop stops at ``max_epochs`` or once the fraction of newly constrained
planner pairs drops below ``convergence_new_constrained_frac``; a converged
epoch does not train. Demonstration pairs are never labelled constrained and
planner pairs never unconstrained.

    uv run python -m drive_constraints.cli train-constraint --out runs/demo
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .constraint import (
    BIAS_PRIOR,
    DEMO,
    PLANNER,
    ConstraintModel,
    LabeledExample,
    constraint_loss,
    init_from_vae,
    save_constraint,
)
from .density import DensityThreshold, VaeModel, recon_error
from .evaluate import min_leader_gap
from .neural import LEARNING_RATE, OptimizerState, step
from .ogm import ACTION_WINDOW_S, GridSpec, instance_pairs, trajectory_pairs
from .planner import SamplingSpec, parallel_map, plan

MAX_EPOCHS = 10
PLANNER_BATCH = 64  # instances per epoch
STEPS_PER_EPOCH = 200
CONVERGENCE_FRAC = 0.02
BATCH_SIZE = 32  # examples per class per step
CONSTRAINT_BETA = 1e-3
PAIR_STRIDE = 5  # timesteps between labelled pairs


@dataclass(frozen=True)
class InferenceConfig:
    max_epochs: int = MAX_EPOCHS
    planner_batch: int = PLANNER_BATCH
    steps_per_epoch: int = STEPS_PER_EPOCH
    convergence_new_constrained_frac: float = CONVERGENCE_FRAC
    seed: int = 0
    batch_size: int = BATCH_SIZE
    beta: float = CONSTRAINT_BETA
    bias_prior: float = BIAS_PRIOR
    learning_rate: float = LEARNING_RATE
    pair_stride: int = PAIR_STRIDE
    window_s: float = ACTION_WINDOW_S
    freeze_backbone: bool = False
    threads: int = 1
    gap_m: float | None = None  # known ground-truth gap, for reporting only

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0.0 <= self.convergence_new_constrained_frac <= 1.0:
            raise ValueError(
                "convergence_new_constrained_frac must be in [0, 1], got "
                f"{self.convergence_new_constrained_frac}"
            )
        if min(self.planner_batch, self.batch_size, self.pair_stride) < 1:
            raise ValueError("planner_batch, batch_size and pair_stride must be >= 1")
        if self.steps_per_epoch < 0:
            raise ValueError(f"steps_per_epoch must be >= 0, got {self.steps_per_epoch}")


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    planner_pairs_total: int
    labeled_constrained: int
    demo_pairs: int
    no_solution_count: int
    planner_pool: int = 0
    mean_loss_parts: dict = field(default_factory=dict)
    converged: bool = False
    gap_violation_frac: float = math.nan

    def __post_init__(self):
        if self.labeled_constrained > self.planner_pairs_total:
            raise ValueError(
                f"{self.labeled_constrained} constrained labels from only "
                f"{self.planner_pairs_total} planner pairs"
            )

    @property
    def new_constrained_frac(self) -> float:
        if not self.planner_pairs_total:
            return 0.0
        return self.labeled_constrained / self.planner_pairs_total


class InferenceDiverged(FloatingPointError):
    """Training went non-finite; carries the last good model and reports."""

    def __init__(self, message, model: ConstraintModel, reports):
        super().__init__(message)
        self.model = model
        self.reports = reports


def label_epoch(
    instances,
    model: ConstraintModel | None,
    vae: VaeModel,
    threshold: DensityThreshold,
    planner_spec: SamplingSpec = SamplingSpec(),
    grid: GridSpec = GridSpec(),
    window_s: float = ACTION_WINDOW_S,
    pair_stride: int = 1,
    threads: int = 1,
    gap_m: float | None = None,
):
    """Plan every instance and label pairs.

    Returns (demo examples, planner examples, EpochReport with epoch 0).
    """

    def one(inst):
        try:
            images, steps = instance_pairs(inst, grid, window_s, pair_stride)
            demo = [LabeledExample(img, DEMO, inst.id, t) for img, t in zip(images, steps)]
            result = plan(inst, model, planner_spec, grid, window_s)
            if result.no_solution:
                return demo, [], 0, True, None
            ego = result.chosen.candidate.ego_array
            pairs, steps = trajectory_pairs(inst, ego, grid, window_s, pair_stride)
            low = threshold.is_low_density(recon_error(vae, pairs))
            flagged = [
                LabeledExample(pairs[i], PLANNER, inst.id, steps[i])
                for i in np.flatnonzero(low)
            ]
            violated = None if gap_m is None else min_leader_gap(inst, ego) < gap_m
            return demo, flagged, len(pairs), False, violated
        except ValueError as exc:
            raise ValueError(f"labeling instance {inst.id}: {exc}") from exc

    outcomes = parallel_map(one, instances, threads)
    demo = [ex for o in outcomes for ex in o[0]]
    planner = [ex for o in outcomes for ex in o[1]]
    checked = [o[4] for o in outcomes if o[4] is not None]
    report = EpochReport(
        epoch=0,
        planner_pairs_total=sum(o[2] for o in outcomes),
        labeled_constrained=len(planner),
        demo_pairs=len(demo),
        no_solution_count=sum(o[3] for o in outcomes),
        gap_violation_frac=float(np.mean(checked)) if checked else math.nan,
    )
    return demo, planner, report


def _train_epoch(model, optimizers, demo, pool, config, rng):
    sums: dict[str, float] = {}
    vae = model.backbone
    for _ in range(config.steps_per_epoch):
        db = [demo[i] for i in _pick(rng, len(demo), config.batch_size)]
        pb = [pool[i] for i in _pick(rng, len(pool), config.batch_size)]
        eps = rng.standard_normal((len(db), vae.latent_dim))
        _, grads, parts = constraint_loss(
            model,
            db,
            pb,
            config.beta,
            eps,
            demo_weight=1.0 / len(db) if db else 1.0,
            planner_weight=1.0 / len(pb) if pb else 1.0,
        )
        step(optimizers["head"], model.head, grads.head)
        if not model.freeze_backbone:
            step(optimizers["encoder"], vae.encoder, grads.encoder)
            step(optimizers["decoder"], vae.decoder, grads.decoder)
        for k, v in parts.items():
            sums[k] = sums.get(k, 0.0) + v
    n = max(config.steps_per_epoch, 1)
    return {k: v / n for k, v in sums.items()}


def _pick(rng, n, k):
    if n == 0:
        return []
    return np.sort(rng.choice(n, size=min(k, n), replace=False))


def run_inference(
    instances,
    vae: VaeModel,
    threshold: DensityThreshold,
    config: InferenceConfig = InferenceConfig(),
    planner_spec: SamplingSpec = SamplingSpec(),
    grid: GridSpec = GridSpec(),
    run_dir=None,
    verbose: bool = False,
):
    """Learn a constraint model from training instances.

    With ``run_dir`` every epoch's model goes to ``epoch_NNN.ckpt`` and the
    reports to ``epoch_reports.csv``. Returns (model, reports).
    """
    if not instances:
        raise ValueError("run_inference needs at least one training instance")
    model = init_from_vae(
        vae, config.bias_prior, seed=config.seed, freeze_backbone=config.freeze_backbone
    )
    optimizers = {
        "encoder": OptimizerState.for_model(model.backbone.encoder, config.learning_rate),
        "decoder": OptimizerState.for_model(model.backbone.decoder, config.learning_rate),
        "head": OptimizerState.for_model(model.head, config.learning_rate),
    }
    rng = np.random.default_rng(config.seed)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    pool: list[LabeledExample] = []
    reports: list[EpochReport] = []
    last_good = model.copy()
    for epoch in range(1, config.max_epochs + 1):
        picked = _pick(rng, len(instances), config.planner_batch)
        demo, planner, frag = label_epoch(
            [instances[i] for i in picked],
            model,
            vae,
            threshold,
            planner_spec,
            grid,
            config.window_s,
            config.pair_stride,
            config.threads,
            config.gap_m,
        )
        pool.extend(planner)
        converged = frag.new_constrained_frac < config.convergence_new_constrained_frac
        parts = {}
        if not converged:
            try:
                parts = _train_epoch(model, optimizers, demo, pool, config, rng)
            except FloatingPointError as exc:
                if run_dir is not None:
                    save_constraint(run_dir / "last_good.ckpt", last_good)
                raise InferenceDiverged(
                    f"constraint training diverged in epoch {epoch}: {exc}",
                    last_good,
                    reports,
                ) from exc
        report = replace(
            frag,
            epoch=epoch,
            planner_pool=len(pool),
            mean_loss_parts=parts,
            converged=converged,
        )
        reports.append(report)
        last_good = model.copy()
        if run_dir is not None:
            save_constraint(run_dir / f"epoch_{epoch:03d}.ckpt", model)
            reports_frame(reports).to_csv(run_dir / "epoch_reports.csv", index=False)
        if verbose:
            print(
                f"  epoch {epoch:2d}/{config.max_epochs}  planner pairs "
                f"{report.planner_pairs_total:5d}  constrained "
                f"{report.labeled_constrained:4d}  pool {report.planner_pool:5d}  "
                f"no solution {report.no_solution_count:3d}  gap violations "
                f"{report.gap_violation_frac:.3f}"
                + ("  converged" if converged else "")
            )
        if converged:
            break
    return model, reports


def reports_frame(reports) -> pd.DataFrame:
    rows = []
    for r in reports:
        row = {
            "epoch": r.epoch,
            "planner_pairs_total": r.planner_pairs_total,
            "labeled_constrained": r.labeled_constrained,
            "demo_pairs": r.demo_pairs,
            "planner_pool": r.planner_pool,
            "no_solution_count": r.no_solution_count,
            "converged": r.converged,
            "gap_violation_frac": r.gap_violation_frac,
        }
        for k in ("demo_bce", "planner_bce", "rmse", "beta_kl"):
            row[f"loss_{k}"] = r.mean_loss_parts.get(k, math.nan)
        rows.append(row)
    return pd.DataFrame(rows)
