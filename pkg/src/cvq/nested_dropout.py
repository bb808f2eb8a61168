"""Nested channel dropout: train one tokenizer that stays decodable when
only its first n latent channels are kept.

Each training step is a coin flip: with probability ``alpha`` the step runs
truncated — a cutoff c_keep ~ U{1..c} is drawn, channels beyond it are
zeroed, the quantization losses cover only the active channels, and the
adversarial hook (if any) is weighted by a sigmoid ramp over c_keep so
heavily-truncated reconstructions aren't pushed toward photo-realism they
cannot carry. With probability 1 - alpha the step trains the full
configuration. The expected objective is the alpha-mix of the two.

Only channel-axis codebooks support this (a prefix of channels is a prefix
of tokens); for patch-axis codebooks every token spans all channels, so
truncation cannot be expressed in token space.  ``masked_vq_loss`` exists
as an explicit compatibility baseline: it quantizes patch-wise as usual and
only then zeroes trailing channels of the quantized grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from cvq.errors import ConfigError
from cvq.quantizer import Codebook, quantize_channelwise, quantize_patchwise
from cvq.tensor import Tensor, expand, mul, reshape
from cvq.tokenizer import AXIS_CHANNEL, AXIS_PATCH, Autoencoder, LatentGrid, tokenizer_loss


@dataclass(frozen=True)
class DropoutSchedule:
    """Hyperparameters of the nested dropout objective.

    alpha: probability a step runs truncated (0 disables dropout entirely)
    channels: latent channel count c (the truncation axis)
    eta: steepness of the adversarial-weight ramp over c_keep
    lambda0: full-configuration adversarial weight (the ramp's ceiling)
    """

    alpha: float
    channels: int
    eta: float = 0.05
    lambda0: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1], got {self.alpha}")
        if self.channels < 1:
            raise ConfigError(f"channel count must be positive, got {self.channels}")


@dataclass(frozen=True)
class TruncationMask:
    """Keep channels 1..c_keep, zero the rest."""

    c_keep: int
    channels: int

    def __post_init__(self):
        if not 1 <= self.c_keep <= self.channels:
            raise ConfigError(f"c_keep must be in [1, {self.channels}], got {self.c_keep}")

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.channels)
        m[: self.c_keep] = 1.0
        return m


def sample_c_keep(schedule: DropoutSchedule, rng: np.random.Generator) -> Optional[int]:
    """Draw the step's configuration: None for full, else c_keep ~ U{1..c}.

    Always consumes exactly one uniform draw for the branch decision, plus
    one integer draw when truncated.  Callers should dedicate an RNG stream
    to this so alpha=0 runs are bit-identical to dropout-free training.
    """
    if rng.random() < schedule.alpha:
        return int(rng.integers(1, schedule.channels + 1))
    return None


def apply_mask(grid: LatentGrid, mask: TruncationMask) -> LatentGrid:
    """Zero all channels beyond the cutoff (differentiable; masked channels
    get zero gradient). Idempotent for a given mask."""
    if mask.channels != grid.c:
        raise ConfigError(f"mask over {mask.channels} channels applied to grid with c={grid.c}")
    m = expand(reshape(Tensor(mask.mask), (1, 1, 1, grid.c)), grid.values.shape)
    return LatentGrid(mul(grid.values, m))


def lambda_gan(c_keep: int, schedule: DropoutSchedule) -> float:
    """Sigmoid ramp lambda0 / (1 + exp(-eta * (c_keep - c/2))).

    Rises with the number of active channels: ~lambda0/2 at half capacity,
    approaching lambda0 at full capacity, small when almost everything is
    truncated away.
    """
    if not 1 <= c_keep <= schedule.channels:
        raise ConfigError(f"c_keep must be in [1, {schedule.channels}], got {c_keep}")
    return schedule.lambda0 / (1.0 + math.exp(-schedule.eta * (c_keep - schedule.channels / 2.0)))


def nested_loss(
    x: Tensor,
    grid: LatentGrid,
    codebook: Codebook,
    autoenc: Autoencoder,
    c_keep: int,
    schedule: DropoutSchedule,
    beta: float = 0.25,
    lpips_fn: Optional[Callable] = None,
    gan_fn: Optional[Callable] = None,
    lambda_lpips: float = 1.0,
    record: bool = True,
):
    """Truncated-configuration objective: quantize the first c_keep channels
    (quantization losses over those only), decode the zero-padded grid, and
    weight the adversarial hook by lambda_gan(c_keep).

    Returns (total, components); components carries branch bookkeeping for
    per-step logs.
    """
    if codebook.axis != AXIS_CHANNEL:
        raise ConfigError(
            "nested dropout requires channel-axis quantization; a patch-axis "
            "codebook has no channel-prefix tokens to truncate (see masked_vq_loss "
            "for the compatibility baseline)"
        )
    quant = quantize_channelwise(grid, codebook, c_keep=c_keep, record=record)
    x_hat = autoenc.decode(quant.zq)
    lam = lambda_gan(c_keep, schedule)
    total, components = tokenizer_loss(
        x, x_hat, quant, beta=beta,
        lpips_fn=lpips_fn, gan_fn=gan_fn,
        lambda_lpips=lambda_lpips, lambda_gan=lam,
    )
    components.update({"branch": "truncated", "c_keep": c_keep, "lambda_gan": lam})
    return total, components


def masked_vq_loss(
    x: Tensor,
    grid: LatentGrid,
    codebook: Codebook,
    autoenc: Autoencoder,
    c_keep: int,
    schedule: DropoutSchedule,
    beta: float = 0.25,
    lpips_fn: Optional[Callable] = None,
    gan_fn: Optional[Callable] = None,
    lambda_lpips: float = 1.0,
    record: bool = True,
):
    """Compatibility baseline: patch-wise quantization with post-hoc channel
    masking.  Patch tokens cannot be truncated, so the full grid is
    quantized (losses over everything) and only the decoder input is
    masked.  Exists to make the contrast with true nested training testable.
    """
    if codebook.axis != AXIS_PATCH:
        raise ConfigError("masked_vq_loss is the patch-axis baseline; use nested_loss for channel axis")
    quant = quantize_patchwise(grid, codebook, record=record)
    masked = apply_mask(quant.zq, TruncationMask(c_keep, grid.c))
    x_hat = autoenc.decode(masked)
    lam = lambda_gan(c_keep, schedule)
    total, components = tokenizer_loss(
        x, x_hat, quant, beta=beta,
        lpips_fn=lpips_fn, gan_fn=gan_fn,
        lambda_lpips=lambda_lpips, lambda_gan=lam,
    )
    components.update({"branch": "truncated", "c_keep": c_keep, "lambda_gan": lam})
    return total, components


def hybrid_step_loss(
    x: Tensor,
    grid: LatentGrid,
    codebook: Codebook,
    autoenc: Autoencoder,
    schedule: DropoutSchedule,
    dropout_rng: np.random.Generator,
    beta: float = 0.25,
    lpips_fn: Optional[Callable] = None,
    gan_fn: Optional[Callable] = None,
    lambda_lpips: float = 1.0,
    compat_patch_mask: bool = False,
    record: bool = True,
):
    """One training step's objective under the stochastic full/truncated mix.

    The full branch is the plain composite objective at full adversarial
    weight lambda0; the truncated branch is nested_loss (or masked_vq_loss
    for a patch codebook when ``compat_patch_mask`` is set).
    """
    c_keep = sample_c_keep(schedule, dropout_rng)
    if c_keep is None:
        if codebook.axis == AXIS_CHANNEL:
            quant = quantize_channelwise(grid, codebook, record=record)
        else:
            quant = quantize_patchwise(grid, codebook, record=record)
        x_hat = autoenc.decode(quant.zq)
        total, components = tokenizer_loss(
            x, x_hat, quant, beta=beta,
            lpips_fn=lpips_fn, gan_fn=gan_fn,
            lambda_lpips=lambda_lpips, lambda_gan=schedule.lambda0,
        )
        components.update({"branch": "full", "c_keep": grid.c, "lambda_gan": schedule.lambda0})
        return total, components
    if codebook.axis == AXIS_PATCH:
        if not compat_patch_mask:
            raise ConfigError(
                "nested dropout drew a truncated step for a patch-axis codebook; "
                "set alpha=0 or enable the masked-VQ compatibility baseline"
            )
        return masked_vq_loss(
            x, grid, codebook, autoenc, c_keep, schedule, beta=beta,
            lpips_fn=lpips_fn, gan_fn=gan_fn, lambda_lpips=lambda_lpips, record=record,
        )
    return nested_loss(
        x, grid, codebook, autoenc, c_keep, schedule, beta=beta,
        lpips_fn=lpips_fn, gan_fn=gan_fn, lambda_lpips=lambda_lpips, record=record,
    )
