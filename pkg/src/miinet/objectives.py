"""Loss terms for the dehazing stage (least-squares adversarial, cycle,
feature-preservation, weighted total) and the super-resolution stage
(relativistic-average adversarial + perceptual + L1).

Expectations are means over batch and spatial positions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F


class DivergenceError(FloatingPointError):
    """A loss input or value is NaN/Inf."""


def _check_finite(name, *tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise DivergenceError(f"non-finite values in {name}")


def _check_shapes(name, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass(frozen=True)
class IdmLossWeights:
    lambda_cyc: float = 10.0
    beta_percep: float = 1.5

    def __post_init__(self):
        if self.lambda_cyc < 0 or self.beta_percep < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    adv_g_xy: float
    adv_g_yx: float
    adv_d_x: float
    adv_d_y: float
    cyc: float
    percep: float
    total: float

    def as_dict(self):
        return asdict(self)


def lsgan_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """``mean((real - 1)^2) + mean(fake^2)``."""
    _check_finite("discriminator scores", real_scores, fake_scores)
    return (real_scores - 1.0).pow(2).mean() + fake_scores.pow(2).mean()


def lsgan_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """``mean((fake - 1)^2)``: the generator wants its fakes scored as real."""
    _check_finite("generator scores", fake_scores)
    return (fake_scores - 1.0).pow(2).mean()


def cycle_loss(x, f_g_x, y, g_f_y) -> torch.Tensor:
    _check_shapes("cycle_loss (x branch)", x, f_g_x)
    _check_shapes("cycle_loss (y branch)", y, g_f_y)
    return (f_g_x - x).abs().mean() + (g_f_y - y).abs().mean()


def perceptual_loss(fe, x, g_x, y, f_y) -> torch.Tensor:
    """Sum over both translation directions of ``mean |fe(out) - fe(in)|``."""
    _check_shapes("perceptual_loss (x branch)", x, g_x)
    _check_shapes("perceptual_loss (y branch)", y, f_y)
    return (fe(g_x) - fe(x)).abs().mean() + (fe(f_y) - fe(y)).abs().mean()


def idm_total(adv_g_xy, adv_g_yx, cyc, percep, weights: IdmLossWeights = IdmLossWeights()):
    """Adversarial terms of both mappings plus weighted cycle and perceptual terms."""
    return adv_g_xy + adv_g_yx + weights.lambda_cyc * cyc + weights.beta_percep * percep


# --------------------------------------------------------------------------
# Super-resolution
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SrLossWeights:
    perceptual: float = 1.0
    adversarial: float = 5e-3
    l1: float = 1e-2


def relativistic_losses(d_real: torch.Tensor, d_fake: torch.Tensor):
    """Relativistic average GAN losses ``(generator, discriminator)``.

    ``D_ra(a, b) = sigmoid(C(a) - mean C(b))``; each loss is a sum of two
    binary cross-entropies, so both equal ``2 ln 2`` when all logits agree.
    """
    _check_finite("SR discriminator logits", d_real, d_fake)
    real_rel = d_real - d_fake.mean()
    fake_rel = d_fake - d_real.mean()
    ones, zeros = torch.ones_like(real_rel), torch.zeros_like(real_rel)
    bce = F.binary_cross_entropy_with_logits
    d_loss = bce(real_rel, ones) + bce(fake_rel, zeros)
    g_loss = bce(real_rel, zeros) + bce(fake_rel, ones)
    return g_loss, d_loss


def sr_losses(sr_out, hr, d_real, d_fake, fe, weights: SrLossWeights = SrLossWeights()):
    """Composite super-resolution losses on ``[0, 1]`` images.

    Returns ``(g_total, d_total, parts)`` with ``parts`` holding the
    unweighted ``l1``, ``perceptual``, ``adv_g`` and ``adv_d`` tensors.
    For the discriminator update pass logits computed on a detached
    ``sr_out``; for the generator update, ``d_real`` should be recomputed on
    the current discriminator as usual.
    """
    _check_shapes("sr_losses", sr_out, hr)
    _check_finite("SR output", sr_out)
    l1 = (sr_out - hr).abs().mean()
    percep = (fe(sr_out, "unit") - fe(hr, "unit")).abs().mean()
    adv_g, adv_d = relativistic_losses(d_real, d_fake)
    g_total = weights.perceptual * percep + weights.adversarial * adv_g + weights.l1 * l1
    parts = {"l1": l1, "perceptual": percep, "adv_g": adv_g, "adv_d": adv_d}
    return g_total, adv_d, parts

