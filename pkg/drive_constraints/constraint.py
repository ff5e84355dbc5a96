"""Constraint function g: VAE encoder mean -> small head -> one logit.

A state-action pair is constrained when sigmoid(logit) > decision_threshold
(ties are unconstrained). Training minimises

    - sum_demo ln(1 - y + eps) - sum_planner ln(y + eps)
    + sum_demo RMSE + beta * sum_demo KL

where reconstruction and KL terms only ever see demonstration pairs. The
planner-side term reaches the backbone only through the encoder mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .density import VaeModel, _noise, auxiliary_terms, encode_mean
from .neural import (
    NetworkModel,
    backward,
    forward,
    load_checkpoint,
    save_checkpoint,
    zero_grads,
)
from .ogm import ACTION_WINDOW_S, GridSpec, encode_action, encode_state, window_steps
from .scene import RoadSpec, VehicleState

BIAS_PRIOR = 0.1
DECISION_THRESHOLD = 0.5
EPS_CLAMP = 1e-7
HEAD_HIDDEN = 32

DEMO = "demo_unconstrained"
PLANNER = "planner_constrained"
LABELS = (DEMO, PLANNER)

_CHUNK = 256


@dataclass(frozen=True, eq=False)
class LabeledExample:
    image: np.ndarray
    label: str
    instance_id: str = ""
    t: int = 0

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")


@dataclass(eq=False)
class ConstraintModel:
    backbone: VaeModel
    head: NetworkModel
    decision_threshold: float = DECISION_THRESHOLD
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.head.input_shape != (self.backbone.latent_dim,):
            raise ValueError(
                f"head input {self.head.input_shape} != latent "
                f"({self.backbone.latent_dim},)"
            )
        if self.head.output_shape != (1,):
            raise ValueError(f"head must output one logit, got {self.head.output_shape}")

    @property
    def input_shape(self):
        return self.backbone.input_shape

    def copy(self) -> "ConstraintModel":
        return ConstraintModel(
            self.backbone.copy(),
            self.head.copy(),
            self.decision_threshold,
            self.freeze_backbone,
        )


@dataclass(eq=False)
class ConstraintGrads:
    encoder: list
    decoder: list
    head: list


def build_head(latent_dim: int, hidden: int = HEAD_HIDDEN, seed: int = 0):
    plan = [("dense", hidden), ("act",), ("dense", 1)] if hidden else [("dense", 1)]
    return NetworkModel.build((latent_dim,), plan, seed)


def init_from_vae(
    vae: VaeModel,
    bias_prior: float = BIAS_PRIOR,
    hidden: int = HEAD_HIDDEN,
    seed: int = 0,
    decision_threshold: float = DECISION_THRESHOLD,
    freeze_backbone: bool = False,
) -> ConstraintModel:
    """Classifier on a copy of ``vae`` that outputs ``bias_prior`` everywhere.

    The head's output layer starts with zero weights and bias logit(prior).
    """
    if not 0.0 < bias_prior < 1.0:
        raise ValueError(f"bias_prior must be in (0, 1), got {bias_prior}")
    head = build_head(vae.latent_dim, hidden, seed)
    head.params[-1]["W"][:] = 0.0
    head.params[-1]["b"][:] = logit(bias_prior)
    return ConstraintModel(vae.copy(), head, decision_threshold, freeze_backbone)


def _logits(model: ConstraintModel, x) -> np.ndarray:
    out = np.empty(len(x))
    for lo in range(0, len(x), _CHUNK):
        chunk = np.asarray(x[lo : lo + _CHUNK], dtype=float)
        head_out, _ = forward(model.head, encode_mean(model.backbone, chunk))
        out[lo : lo + len(chunk)] = head_out[:, 0]
    return out


def classify(model: ConstraintModel, image):
    """Probability that a pair (or each pair of a batch) is constrained."""
    single = np.shape(image) == model.input_shape
    x = np.asarray(image)
    if single:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise ValueError(
            f"image shape {x.shape[1:]} does not match the classifier input "
            f"{model.input_shape}"
        )
    p = expit(_logits(model, x))
    return float(p[0]) if single else p


def is_constrained(model: ConstraintModel, image):
    """Strictly above the decision threshold; a batch gives a boolean array."""
    return classify(model, image) > model.decision_threshold


def _stack(model: ConstraintModel, batch, label: str) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        x = batch
    elif len(batch) == 0:
        x = np.zeros((0,) + model.input_shape)
    else:
        wrong = [ex.label for ex in batch if ex.label != label]
        if wrong:
            raise ValueError(
                f"{len(wrong)} example(s) labelled {wrong[0]!r} in the {label} batch"
            )
        x = np.stack([ex.image for ex in batch])
    x = np.asarray(x, dtype=float).reshape((-1,) + model.input_shape)
    return x


def constraint_loss(
    model: ConstraintModel,
    demo_batch,
    planner_batch,
    beta: float,
    noise=0,
    demo_weight: float = 1.0,
    planner_weight: float = 1.0,
):
    """Full training loss, its gradients and its parts.

    Batches are LabeledExample sequences or image arrays. ``demo_weight``
    scales every demonstration term and ``planner_weight`` the planner term;
    at 1.0 both give the plain sums. Returns (loss, ConstraintGrads, parts)
    with parts demo_bce, planner_bce, rmse and beta_kl summing to the loss.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    vae = model.backbone
    demo = _stack(model, demo_batch, DEMO)
    planner = _stack(model, planner_batch, PLANNER)
    nd, n = len(demo), len(demo) + len(planner)
    parts = {"demo_bce": 0.0, "planner_bce": 0.0, "rmse": 0.0, "beta_kl": 0.0}
    if n == 0:
        grads = ConstraintGrads(
            zero_grads(vae.encoder), zero_grads(vae.decoder), zero_grads(model.head)
        )
        return 0.0, grads, parts

    x = np.concatenate([demo, planner])
    L = vae.latent_dim
    enc_out, enc_cache = forward(vae.encoder, x)
    logits, head_cache = forward(model.head, enc_out[:, :L])
    y = expit(logits[:, 0])
    yd, yp = y[:nd], y[nd:]
    parts["demo_bce"] = float(-demo_weight * np.sum(np.log(1.0 - yd + EPS_CLAMP)))
    parts["planner_bce"] = float(-planner_weight * np.sum(np.log(yp + EPS_CLAMP)))
    # d/dlogit of -ln(1 - y + eps) is y(1 - y) / (1 - y + eps), and of -ln(y + eps)
    # is -y(1 - y) / (y + eps); with eps = 0 these reduce to y and y - 1, and
    # the clamp keeps them finite once the sigmoid saturates
    d_logit = np.concatenate(
        [
            demo_weight * yd * (1.0 - yd) / (1.0 - yd + EPS_CLAMP),
            -planner_weight * yp * (1.0 - yp) / (yp + EPS_CLAMP),
        ]
    )
    head_grads, d_mu = backward(model.head, head_cache, d_logit[:, None])

    d_enc = np.zeros_like(enc_out)
    d_enc[:, :L] = d_mu
    if nd:
        eps = _noise(noise, (nd, L))
        rmse_sum, kl_sum, dec_grads, d_aux = auxiliary_terms(
            vae, demo, enc_out[:nd], eps, beta, demo_weight
        )
        d_enc[:nd] += d_aux
        parts["rmse"] = demo_weight * rmse_sum
        parts["beta_kl"] = demo_weight * beta * kl_sum
    else:
        dec_grads = zero_grads(vae.decoder)
    enc_grads, _ = backward(vae.encoder, enc_cache, d_enc)

    loss = sum(parts.values())
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite constraint loss, parts {parts}")
    return loss, ConstraintGrads(enc_grads, dec_grads, head_grads), parts


# --- drivable region ---


@dataclass(frozen=True, eq=False)
class SceneContext:
    """One frozen scene: neighbor frame array (n, 6), road and ego state."""

    frame: np.ndarray
    road: RoadSpec
    ego: VehicleState


def context_from_instance(instance, t: int = 0) -> SceneContext:
    return SceneContext(instance.neighbors[:, t, :], instance.road, instance.ego_state(t))


def drivable_region(
    model: ConstraintModel,
    context: SceneContext,
    long_offsets,
    lat_offsets,
    grid: GridSpec,
    window_s: float = ACTION_WINDOW_S,
    dt: float = 0.1,
) -> np.ndarray:
    """Mask over (long_offsets x lat_offsets); True where the ego, moved by
    that offset and driving on at constant velocity, is unconstrained.

    Each shifted ego is re-anchored: the state is encoded around it, as for
    every training pair.
    """
    long_offsets = np.asarray(long_offsets, dtype=float)
    lat_offsets = np.asarray(lat_offsets, dtype=float)
    lat_cov, long_cov = grid.coverage
    if np.abs(long_offsets).max(initial=0) > long_cov / 2 or np.abs(lat_offsets).max(
        initial=0
    ) > lat_cov / 2:
        raise ValueError(
            f"offsets must stay within the grid coverage "
            f"(+-{long_cov / 2} m along, +-{lat_cov / 2} m across)"
        )
    ego = context.ego
    n_a = window_steps(window_s, dt)
    k = np.arange(n_a + 1)[:, None] * dt
    images = np.zeros((len(long_offsets) * len(lat_offsets),) + grid.pair_shape)
    i = 0
    for ds in long_offsets:
        for dd in lat_offsets:
            anchor = (ego.s + ds, ego.d + dd, ego.v_s, ego.v_d)
            window = np.hstack(
                [
                    anchor[0] + ego.v_s * k,
                    anchor[1] + ego.v_d * k,
                    np.full_like(k, ego.v_s),
                    np.full_like(k, ego.v_d),
                ]
            )
            images[i, :4] = encode_state(context.frame, context.road, anchor, grid)
            images[i, 4:] = encode_action(window, anchor, grid, ego.length, ego.width)
            i += 1
    constrained = classify(model, images) > model.decision_threshold
    return ~constrained.reshape(len(long_offsets), len(lat_offsets))


# --- checkpoints ---


def save_constraint(path, model: ConstraintModel):
    vae = model.backbone
    meta = {
        "kind": "vae+head",
        "latent_dim": vae.latent_dim,
        "backbone": vae.backbone,
        "decision_threshold": model.decision_threshold,
        "freeze_backbone": model.freeze_backbone,
    }
    nets = {"encoder": vae.encoder, "decoder": vae.decoder, "head": model.head}
    return save_checkpoint(path, nets, meta)


def load_constraint(path) -> ConstraintModel:
    nets, meta = load_checkpoint(path)
    if meta.get("kind") != "vae+head":
        raise ValueError(
            f"{path}: checkpoint kind {meta.get('kind')!r} is not a constraint model"
        )
    vae = VaeModel(nets["encoder"], nets["decoder"], meta["latent_dim"], meta["backbone"])
    return ConstraintModel(
        vae, nets["head"], meta["decision_threshold"], meta["freeze_backbone"]
    )
