"""Training losses and the anomaly score.

Losses operate on torch tensors so they can be differentiated; the score
helpers accept anything numpy can convert.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    adversarial: float = 1.0
    contextual: float = 40.0
    latent: float = 1.0

    def __post_init__(self):
        w = (self.adversarial, self.contextual, self.latent)
        if any(x < 0 for x in w):
            raise ConfigurationError(f"loss weights must be non-negative, got {w}")
        if not any(w):
            raise ConfigurationError("at least one loss weight must be positive")


@dataclass(frozen=True)
class LossBundle:
    l_adv: torch.Tensor
    l_con: torch.Tensor
    l_lat: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {k: float(getattr(self, k)) for k in ("l_adv", "l_con", "l_lat", "total")}


def _clamp(p):
    return p.clamp(PROB_EPS, 1 - PROB_EPS)


def adversarial_loss(p_real, p_fake, generator_form="non_saturating"):
    """Return ``(d_loss, g_loss)`` for per-sample probabilities.

    The discriminator minimizes ``-mean[log p_real + log(1 - p_fake)]``.
    The generator minimizes ``-mean[log p_fake]`` (non-saturating) or
    ``mean[log(1 - p_fake)]`` with ``generator_form="minimax"``.
    """
    p_real, p_fake = _clamp(p_real), _clamp(p_fake)
    d_loss = -(torch.log(p_real).mean() + torch.log1p(-p_fake).mean())
    if generator_form == "non_saturating":
        g_loss = -torch.log(p_fake).mean()
    elif generator_form == "minimax":
        g_loss = torch.log1p(-p_fake).mean()
    else:
        raise ConfigurationError(f"unknown generator loss form {generator_form!r}")
    return d_loss, g_loss


def _l1(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def contextual_loss(x, x_hat):
    """Mean absolute reconstruction error."""
    return _l1(x, x_hat, "contextual_loss")


def latent_loss(f_x, f_xhat):
    """Mean absolute distance between discriminator features."""
    return _l1(f_x, f_xhat, "latent_loss")


def total_loss(l_adv, l_con, l_lat, weights=LossWeights()):
    total = weights.adversarial * l_adv + weights.contextual * l_con + weights.latent * l_lat
    return LossBundle(l_adv, l_con, l_lat, total)


def anomaly_score(a_g, a_d, eta=0.9):
    """Blend reconstruction and feature distances: ``eta*a_g + (1-eta)*a_d``."""
    if not 0.0 <= eta <= 1.0:
        raise ConfigurationError(f"eta must lie in [0, 1], got {eta}")
    if eta == 1.0:
        return a_g
    if eta == 0.0:
        return a_d
    return eta * a_g + (1.0 - eta) * a_d


def per_sample_l1(a, b):
    """Mean absolute difference over every axis but the first."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().flatten(1).mean(dim=1)


def normalize_scores(scores, reference=None):
    """Min-max scale a score vector into [0, 1].

    By default min and max come from ``scores`` itself. Pass
    ``reference=(lo, hi)`` to scale with fixed statistics instead; values
    are then clipped into [0, 1]. A degenerate range maps everything to 0.
    """
    v = np.asarray(scores, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot normalize an empty score vector")
    lo, hi = (v.min(), v.max()) if reference is None else map(float, reference)
    span = hi - lo
    if not span > 0 or not math.isfinite(span):
        log.warning("degenerate score range [%g, %g]; all normalized scores set to 0", lo, hi)
        return np.zeros_like(v)
    out = (v - lo) / span
    if reference is not None:
        out = np.clip(out, 0.0, 1.0)
    return out
