"""VAE density proxy over demonstration state-action images.

The VAE is never asked for a likelihood. A pair counts as low-density when
its reconstruction error (RMSE between the image and the decoding of the
posterior mean) is above ``e_th``, an order statistic of the errors on
held-out demonstration pairs.

Training loss per example: RMSE(x, decode(mu + sigma * eps)) + beta * KL, with
the closed-form KL of the diagonal Gaussian posterior against N(0, I) and
beta following a cyclical ramp schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .neural import (
    LEARNING_RATE,
    NetworkModel,
    OptimizerState,
    backward,
    forward,
    load_checkpoint,
    save_checkpoint,
    step,
)

LATENT_DIM = 16
HIDDEN = 128  # MLP backbone width
CONV_CHANNELS = (16, 32)
BATCH_SIZE = 64
CALIBRATION_QUANTILE = 0.95
BETA_MAX = 1e-3
CYCLE_LEN = 400  # optimizer steps
RAMP_RATIO = 0.5
_SCORE_CHUNK = 256


@dataclass(eq=False)
class VaeModel:
    encoder: NetworkModel
    decoder: NetworkModel
    latent_dim: int
    backbone: str = "mlp"

    def __post_init__(self):
        if self.encoder.output_shape != (2 * self.latent_dim,):
            raise ValueError(
                f"encoder must output 2 x latent_dim = {2 * self.latent_dim} "
                f"values, got {self.encoder.output_shape}"
            )
        if self.decoder.input_shape != (self.latent_dim,):
            raise ValueError(
                f"decoder input {self.decoder.input_shape} != ({self.latent_dim},)"
            )
        if self.decoder.output_shape != self.encoder.input_shape:
            raise ValueError(
                f"decoder output {self.decoder.output_shape} does not match "
                f"encoder input {self.encoder.input_shape}"
            )

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.encoder.input_shape

    def copy(self) -> "VaeModel":
        return VaeModel(
            self.encoder.copy(), self.decoder.copy(), self.latent_dim, self.backbone
        )


def build_vae(
    input_shape,
    latent_dim: int = LATENT_DIM,
    hidden: int = HIDDEN,
    backbone: str = "mlp",
    seed: int = 0,
    channels: tuple[int, int] = CONV_CHANNELS,
) -> VaeModel:
    """MLP (flattened image) or conv (two stride-2 stages) VAE."""
    shape = tuple(int(x) for x in input_shape)
    size = int(np.prod(shape))
    if backbone == "mlp":
        enc_plan = [("flatten",), ("dense", hidden), ("act",), ("dense", 2 * latent_dim)]
        dec_plan = [("dense", hidden), ("act",), ("dense", size), ("reshape", shape)]
    elif backbone == "conv":
        c, h, w = shape
        if h % 4 or w % 4:
            raise ValueError(f"conv backbone needs extents divisible by 4, got {shape}")
        c1, c2 = channels
        inner = (c2, h // 4, w // 4)
        enc_plan = [
            ("conv", c1),
            ("act",),
            ("conv", c2),
            ("act",),
            ("flatten",),
            ("dense", 2 * latent_dim),
        ]
        dec_plan = [
            ("dense", int(np.prod(inner))),
            ("act",),
            ("reshape", inner),
            ("deconv", c1),
            ("act",),
            ("deconv", c),
        ]
    else:
        raise ValueError(f"backbone must be 'mlp' or 'conv', got {backbone!r}")
    return VaeModel(
        NetworkModel.build(shape, enc_plan, seed),
        NetworkModel.build((latent_dim,), dec_plan, seed + 1),
        latent_dim,
        backbone,
    )


@dataclass(frozen=True)
class BetaSchedule:
    cycle_len: int = CYCLE_LEN
    ramp_ratio: float = RAMP_RATIO
    beta_max: float = BETA_MAX

    def __post_init__(self):
        if self.cycle_len < 1:
            raise ValueError(f"cycle_len must be >= 1, got {self.cycle_len}")
        if not 0 < self.ramp_ratio <= 1:
            raise ValueError(f"ramp_ratio must be in (0, 1], got {self.ramp_ratio}")
        if self.beta_max < 0:
            raise ValueError(f"beta_max must be >= 0, got {self.beta_max}")


def beta_at(schedule: BetaSchedule, step: int) -> float:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    phase = (step % schedule.cycle_len) / (schedule.ramp_ratio * schedule.cycle_len)
    return schedule.beta_max * min(1.0, phase)


@dataclass(frozen=True)
class DensityThreshold:
    e_th: float
    calibration_quantile: float = CALIBRATION_QUANTILE

    def __post_init__(self):
        if not self.e_th >= 0:
            raise ValueError(f"e_th must be >= 0, got {self.e_th}")

    def is_low_density(self, errors):
        return np.asarray(errors) > self.e_th


@dataclass(eq=False)
class VaeGrads:
    encoder: list
    decoder: list


# --- loss ---


def kl_divergence(mu: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    """KL(N(mu, exp(log_var)) || N(0, I)) per row."""
    # closed form per latent: (sigma^2 + mu^2 - 1 - ln sigma^2) / 2, which is 0
    # exactly at the prior (mu = 0, log_var = 0) and positive elsewhere
    return 0.5 * np.sum(np.exp(log_var) + mu**2 - 1.0 - log_var, axis=-1)


def _batch(model: VaeModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape == model.input_shape:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise ValueError(
            f"image shape {x.shape[1:]} does not match the VAE input "
            f"{model.input_shape}"
        )
    return x


def _noise(noise, shape) -> np.ndarray:
    if isinstance(noise, np.ndarray):
        if noise.shape != shape:
            raise ValueError(f"noise shape {noise.shape} != {shape}")
        return noise
    return np.random.default_rng(noise).standard_normal(shape)


def _rmse(x, x_hat):
    diff = (x_hat - x).reshape(len(x), -1)
    return np.sqrt(np.mean(diff**2, axis=1)), diff


def _rmse_grad(diff, rmse, weight):
    """d(weight * sum_i rmse_i)/d x_hat, 0 where an example is reproduced
    exactly."""
    safe = np.where(rmse > 0, rmse, 1.0)
    g = diff / (diff.shape[1] * safe[:, None])
    return np.where(rmse[:, None] > 0, g, 0.0) * weight


def auxiliary_terms(model: VaeModel, x, enc_out, eps, beta, weight):
    """Reconstruction and KL on rows ``x`` whose encoder output is ``enc_out``.

    Returns (rmse_sum, kl_sum, decoder grads, d enc_out) for the objective
    ``weight * (sum rmse + beta * sum kl)``.
    """
    L = model.latent_dim
    mu, log_var = enc_out[:, :L], enc_out[:, L:]
    sigma = np.exp(0.5 * log_var)
    z = mu + sigma * eps
    x_hat, dec_cache = forward(model.decoder, z)
    rmse, diff = _rmse(x, x_hat)
    kl = kl_divergence(mu, log_var)
    dec_grads, dz = backward(
        model.decoder, dec_cache, _rmse_grad(diff, rmse, weight).reshape(x_hat.shape)
    )
    # z = mu + exp(log_var / 2) * eps, so dz/dlog_var = eps * sigma / 2; the KL
    # term adds mu and (sigma^2 - 1) / 2 on top
    d_mu = dz + weight * beta * mu
    d_lv = dz * eps * 0.5 * sigma + weight * beta * 0.5 * (np.exp(log_var) - 1.0)
    return float(rmse.sum()), float(kl.sum()), dec_grads, np.hstack([d_mu, d_lv])


def vae_loss(model: VaeModel, x, beta: float, noise):
    """Batch-mean RMSE + beta * KL with reparameterised sampling.

    ``noise`` is a seed or an explicit (N, latent_dim) standard-normal draw.
    Returns (loss, VaeGrads, parts) with parts rmse, kl and beta_kl.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    x = _batch(model, x)
    n = len(x)
    eps = _noise(noise, (n, model.latent_dim))
    enc_out, enc_cache = forward(model.encoder, x)
    rmse_sum, kl_sum, dec_grads, d_enc = auxiliary_terms(
        model, x, enc_out, eps, beta, 1.0 / n
    )
    enc_grads, _ = backward(model.encoder, enc_cache, d_enc)
    parts = {"rmse": rmse_sum / n, "kl": kl_sum / n}
    parts["beta_kl"] = beta * parts["kl"]
    loss = parts["rmse"] + parts["beta_kl"]
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite VAE loss (rmse {parts['rmse']}, kl {parts['kl']})")
    return loss, VaeGrads(enc_grads, dec_grads), parts


# --- scoring ---


def encode_mean(model: VaeModel, x) -> np.ndarray:
    out, _ = forward(model.encoder, _batch(model, x))
    return out[:, : model.latent_dim]


def recon_error(model: VaeModel, x):
    """RMSE between x and the decoding of its posterior mean.

    A single image gives a float, a batch gives one error per image.
    """
    single = np.shape(x) == model.input_shape
    x = _batch(model, x)
    errors = np.empty(len(x))
    for lo in range(0, len(x), _SCORE_CHUNK):
        chunk = np.asarray(x[lo : lo + _SCORE_CHUNK], dtype=float)
        x_hat, _ = forward(model.decoder, encode_mean(model, chunk))
        errors[lo : lo + len(chunk)] = _rmse(chunk, x_hat)[0]
    return float(errors[0]) if single else errors


def threshold_from_errors(errors, quantile: float = CALIBRATION_QUANTILE):
    """k-th smallest error with k = max(1, ceil(q * n))."""
    errors = np.sort(np.asarray(errors, dtype=float).reshape(-1))
    if len(errors) == 0:
        raise ValueError("cannot calibrate a threshold on an empty set")
    if not 0.0 <= quantile <= 1.0:
        raise ValueError(f"quantile must be in [0, 1], got {quantile}")
    k = max(1, math.ceil(quantile * len(errors) - 1e-9))
    return DensityThreshold(float(errors[k - 1]), quantile)


def calibrate_threshold(model: VaeModel, held_out, quantile: float = CALIBRATION_QUANTILE):
    if len(held_out) == 0:
        raise ValueError("held-out calibration set is empty")
    return threshold_from_errors(recon_error(model, held_out), quantile)


# --- training ---


def train_vae(
    model: VaeModel,
    dataset,
    epochs: int,
    schedule: BetaSchedule = BetaSchedule(),
    seed: int = 0,
    batch_size: int = BATCH_SIZE,
    learning_rate: float = LEARNING_RATE,
    verbose: bool = False,
):
    """Train a copy of ``model`` on encoded demonstration pairs.

    Returns (trained model, per-epoch log DataFrame with columns
    epoch, rmse, kl, beta).
    """
    if len(dataset) == 0:
        raise ValueError("cannot train a VAE on an empty dataset")
    model = model.copy()
    opt_enc = OptimizerState.for_model(model.encoder, learning_rate)
    opt_dec = OptimizerState.for_model(model.decoder, learning_rate)
    rng = np.random.default_rng(seed)
    n = len(dataset)
    rows = []
    global_step = 0
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(n)
        sums = {"rmse": 0.0, "kl": 0.0}
        beta = 0.0
        for lo in range(0, n, batch_size):
            idx = np.sort(perm[lo : lo + batch_size])
            x = np.asarray(dataset[idx], dtype=float)
            beta = beta_at(schedule, global_step)
            eps = rng.standard_normal((len(x), model.latent_dim))
            try:
                _, grads, parts = vae_loss(model, x, beta, eps)
                step(opt_enc, model.encoder, grads.encoder)
                step(opt_dec, model.decoder, grads.decoder)
            except FloatingPointError as exc:
                raise FloatingPointError(
                    f"VAE training diverged in epoch {epoch}: {exc}"
                ) from exc
            sums["rmse"] += parts["rmse"] * len(x)
            sums["kl"] += parts["kl"] * len(x)
            global_step += 1
        row = (epoch, sums["rmse"] / n, sums["kl"] / n, beta)
        rows.append(row)
        if verbose:
            print(
                f"  epoch {epoch:3d}/{epochs}  rmse {row[1]:.4f}  "
                f"kl {row[2]:.3f}  beta {row[3]:.5f}"
            )
    log = pd.DataFrame(rows, columns=["epoch", "rmse", "kl", "beta"])
    return model, log


# --- checkpoints ---


def vae_meta(vae: VaeModel, threshold: DensityThreshold | None = None) -> dict:
    meta = {"kind": "vae", "latent_dim": vae.latent_dim, "backbone": vae.backbone}
    if threshold is not None:
        meta["e_th"] = threshold.e_th
        meta["calibration_quantile"] = threshold.calibration_quantile
    return meta


def save_vae(path, vae: VaeModel, threshold: DensityThreshold | None = None):
    return save_checkpoint(
        path, {"encoder": vae.encoder, "decoder": vae.decoder}, vae_meta(vae, threshold)
    )


def load_vae(path):
    """Return (VaeModel, DensityThreshold or None)."""
    nets, meta = load_checkpoint(path)
    if meta.get("kind") not in ("vae", "vae+head"):
        raise ValueError(f"{path}: checkpoint kind {meta.get('kind')!r} has no VAE")
    vae = VaeModel(nets["encoder"], nets["decoder"], meta["latent_dim"], meta["backbone"])
    threshold = None
    if "e_th" in meta:
        threshold = DensityThreshold(meta["e_th"], meta["calibration_quantile"])
    return vae, threshold
