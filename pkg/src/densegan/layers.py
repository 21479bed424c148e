"""Layer primitives: spectral normalization, attention-augmented convolution
and the conv block shared by the generator and discriminator.

Spectral normalization is written out by hand instead of using
``torch.nn.utils.spectral_norm`` so that the power-iteration state is an
explicit, inspectable value (:class:`SpectralState`) and so that evaluation
reuses the stored singular vectors without iterating.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError

log = logging.getLogger(__name__)

INIT_STD = 0.02
SIGMA_FLOOR = 1e-12
_NORM_EPS = 1e-12


def _l2normalize(v, eps=_NORM_EPS):
    return v / v.norm().clamp_min(eps)


@dataclass(frozen=True)
class SpectralState:
    """Power-iteration state for one weight matrix.

    ``u_vector`` has one entry per output row of the flattened weight and is
    kept at unit norm. ``v_vector`` is the matching right singular vector
    estimate from the last iteration (None until the first step).
    """

    u_vector: torch.Tensor
    n_power_iterations: int = 1
    v_vector: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.n_power_iterations < 1:
            raise ConfigurationError("n_power_iterations must be a positive integer")
        if self.u_vector.dim() != 1:
            raise ConfigurationError("u_vector must be one-dimensional")

    @classmethod
    def random(cls, rows, n_power_iterations=1, generator=None, dtype=torch.float32):
        u = torch.randn(rows, generator=generator, dtype=dtype)
        return cls(_l2normalize(u), n_power_iterations)


def power_iteration_step(weight, state):
    """Run ``state.n_power_iterations`` rounds of power iteration on ``weight``.

    Returns ``(sigma, new_state)`` where sigma estimates the largest singular
    value of the 2-D ``weight``. A zero matrix yields ``sigma == 0`` and
    leaves the singular vectors untouched; callers must guard the division.
    """
    if weight.dim() != 2:
        raise ConfigurationError(f"power iteration needs a 2-D weight, got shape {tuple(weight.shape)}")
    if state.u_vector.shape[0] != weight.shape[0]:
        raise ConfigurationError(
            f"u_vector has length {state.u_vector.shape[0]} but weight has {weight.shape[0]} rows"
        )
    if not torch.isfinite(weight).all():
        raise ConfigurationError("weight contains NaN or Inf")

    with torch.no_grad():
        u = state.u_vector.to(weight.dtype)
        v = state.v_vector.to(weight.dtype) if state.v_vector is not None else None
        for _ in range(state.n_power_iterations):
            wt_u = weight.t().mv(u)
            if wt_u.norm() <= _NORM_EPS:
                return weight.new_zeros(()), state
            v = _l2normalize(wt_u)
            w_v = weight.mv(v)
            if w_v.norm() <= _NORM_EPS:
                return weight.new_zeros(()), state
            u = _l2normalize(w_v)
        sigma = torch.dot(u, weight.mv(v))
    return sigma, replace(state, u_vector=u, v_vector=v)


def spectral_normalize(weight, state):
    """Divide an N-D weight by its spectral norm.

    The weight is viewed as ``(out_channels, -1)``. If the estimated sigma is
    below ``SIGMA_FLOOR`` the weight is returned unchanged with a warning.
    """
    sigma, state = power_iteration_step(weight.reshape(weight.shape[0], -1), state)
    if sigma < SIGMA_FLOOR:
        log.warning("spectral norm %.3g below floor; weight left unnormalized", float(sigma))
        return weight, state
    return weight / sigma, state


class SNConv2d(nn.Module):
    """2-D convolution whose kernel is spectrally normalized on every call.

    In training mode each forward advances the power iteration by one step
    and stores ``u``, ``v`` and ``sigma`` in buffers. In eval mode the stored
    vectors are reused as-is, so the weight is divided by the stored sigma
    (recomputed as ``u^T W v``, which stays differentiable in ``W``).
    With ``spectral_norm=False`` this is a plain convolution.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None,
                 bias=True, spectral_norm=True, n_power_iterations=1):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ConfigurationError("kernel size must be odd so same-padding preserves size")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.spectral_norm = spectral_norm
        self.n_power_iterations = n_power_iterations
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        if spectral_norm:
            fan = in_channels * kernel_size * kernel_size
            self.register_buffer("u", torch.zeros(out_channels))
            self.register_buffer("v", torch.zeros(fan))
            self.register_buffer("sigma", torch.ones(()))
        self.reset_parameters()

    def reset_parameters(self, generator=None):
        with torch.no_grad():
            self.weight.copy_(torch.randn(self.weight.shape, generator=generator) * INIT_STD)
            if self.bias is not None:
                self.bias.zero_()
            if self.spectral_norm:
                state = SpectralState.random(self.out_channels, generator=generator)
                self.u.copy_(state.u_vector)
                # one warm-up round so v and sigma are consistent with u
                sigma, state = power_iteration_step(self.weight.reshape(self.out_channels, -1), state)
                self.u.copy_(state.u_vector)
                self.v.copy_(state.v_vector)
                self.sigma.copy_(sigma)

    @property
    def state(self):
        return SpectralState(self.u.clone(), self.n_power_iterations, self.v.clone())

    def normalized_weight(self):
        if not self.spectral_norm:
            return self.weight
        w2d = self.weight.reshape(self.out_channels, -1)
        if self.training:
            sigma, state = power_iteration_step(w2d.detach(), self.state)
            with torch.no_grad():
                self.u.copy_(state.u_vector)
                self.v.copy_(state.v_vector)
        sigma = torch.dot(self.u, w2d.mv(self.v))
        if self.training:
            with torch.no_grad():
                self.sigma.copy_(sigma.detach())
        if sigma.detach().abs() < SIGMA_FLOOR:
            log.warning("spectral norm below floor in %s; using raw weight", self)
            return self.weight
        return self.weight / sigma

    def forward(self, x):
        return F.conv2d(x, self.normalized_weight(), self.bias, self.stride, self.padding)

    def extra_repr(self):
        return (f"{self.in_channels}, {self.out_channels}, kernel_size={self.kernel_size}, "
                f"stride={self.stride}, spectral_norm={self.spectral_norm}")


@dataclass
class AttentionParams:
    """Weights of a multi-head self-attention branch.

    Projections act on row vectors: ``q = x @ w_query`` with ``x`` of shape
    ``(positions, in_features)``.
    """

    n_heads: int
    d_k: int
    d_v: int
    w_query: torch.Tensor  # (F_in, n_heads * d_k)
    w_key: torch.Tensor  # (F_in, n_heads * d_k)
    w_value: torch.Tensor  # (F_in, n_heads * d_v)
    w_out: torch.Tensor  # (n_heads * d_v, n_heads * d_v)

    @property
    def out_channels(self):
        return self.n_heads * self.d_v


def multi_head_self_attention(x, params, return_weights=False):
    """Scaled dot-product self-attention over positions.

    ``x`` has shape ``(..., positions, F_in)``; the result has shape
    ``(..., positions, n_heads * d_v)``. With ``return_weights`` the
    per-head attention matrices ``(..., n_heads, positions, positions)`` are
    returned as well.
    """
    f_in = x.shape[-1]
    if params.w_query.shape[0] != f_in:
        raise ConfigurationError(f"attention expects {params.w_query.shape[0]} input features, got {f_in}")
    nh, dk, dv = params.n_heads, params.d_k, params.d_v
    lead = x.shape[:-2]
    n = x.shape[-2]

    def split(t, d):
        return t.reshape(*lead, n, nh, d).transpose(-3, -2)  # (..., nh, n, d)

    q = split(x @ params.w_query, dk)
    k = split(x @ params.w_key, dk)
    v = split(x @ params.w_value, dv)
    logits = q @ k.transpose(-1, -2) / math.sqrt(dk)
    weights = torch.softmax(logits, dim=-1)
    heads = weights @ v  # (..., nh, n, dv)
    out = heads.transpose(-3, -2).reshape(*lead, n, nh * dv) @ params.w_out
    if return_weights:
        return out, weights
    return out


class AttentionAugmentedConv2d(nn.Module):
    """Concatenation of a spectrally-normalized convolution with
    multi-head self-attention computed over all spatial positions.

    ``out_channels`` is split into ``out_channels - n_heads * d_v`` conv
    channels followed by ``n_heads * d_v`` attention channels. By default
    ``d_k = d_v = out_channels // 8``.
    """

    def __init__(self, in_channels, out_channels, n_heads=4, d_k=None, d_v=None,
                 kernel_size=3, spectral_norm=True):
        super().__init__()
        d_k = d_k if d_k is not None else out_channels // 8
        d_v = d_v if d_v is not None else out_channels // 8
        if n_heads < 1 or d_k < 1 or d_v < 1:
            raise ConfigurationError(
                f"attention needs positive n_heads, d_k, d_v (got {n_heads}, {d_k}, {d_v})")
        conv_channels = out_channels - n_heads * d_v
        if conv_channels < 1:
            raise ConfigurationError(
                f"out_channels={out_channels} leaves no room for a conv branch next to "
                f"{n_heads} heads x d_v={d_v}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv_channels = conv_channels
        self.n_heads, self.d_k, self.d_v = n_heads, d_k, d_v
        self.conv = SNConv2d(in_channels, conv_channels, kernel_size, spectral_norm=spectral_norm)
        self.w_query = nn.Parameter(torch.empty(in_channels, n_heads * d_k))
        self.w_key = nn.Parameter(torch.empty(in_channels, n_heads * d_k))
        self.w_value = nn.Parameter(torch.empty(in_channels, n_heads * d_v))
        self.w_out = nn.Parameter(torch.empty(n_heads * d_v, n_heads * d_v))
        self.reset_parameters()

    def reset_parameters(self, generator=None):
        self.conv.reset_parameters(generator)
        with torch.no_grad():
            for w in (self.w_query, self.w_key, self.w_value, self.w_out):
                w.copy_(torch.randn(w.shape, generator=generator) * INIT_STD)

    def attention_params(self):
        return AttentionParams(self.n_heads, self.d_k, self.d_v,
                               self.w_query, self.w_key, self.w_value, self.w_out)

    def forward(self, x, return_weights=False):
        b, c, h, w = x.shape
        conv_out = self.conv(x)
        flat = x.reshape(b, c, h * w).transpose(1, 2)  # (B, HW, C)
        attn, weights = multi_head_self_attention(flat, self.attention_params(), return_weights=True)
        attn = attn.transpose(1, 2).reshape(b, self.n_heads * self.d_v, h, w)
        out = torch.cat([conv_out, attn], dim=1)
        if return_weights:
            return out, weights
        return out


def upsample(x, mode="nearest"):
    """2x spatial upsampling (the U operator of the skip pathway)."""
    if mode == "nearest":
        return F.interpolate(x, scale_factor=2, mode="nearest")
    if mode == "bilinear":
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
    raise ConfigurationError(f"unknown upsampling mode {mode!r}")


_ACTIVATIONS = {
    "relu": F.relu,
    "leaky_relu": lambda t: F.leaky_relu(t, 0.2),
    None: lambda t: t,
}


class ConvBlock(nn.Module):
    """Spectrally-normalized 3x3 convolution followed by an activation.

    ``direction`` is ``"down"`` (stride 2, halves H and W), ``"up"`` (2x
    upsample then conv, doubles H and W) or ``"same"`` (size preserved).
    """

    def __init__(self, in_channels, out_channels, direction="same", activation="relu",
                 spectral_norm=True, upsample_mode="nearest"):
        super().__init__()
        if direction not in ("down", "up", "same"):
            raise ConfigurationError(f"unknown conv block direction {direction!r}")
        if activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.direction = direction
        self.activation = activation
        self.upsample_mode = upsample_mode
        stride = 2 if direction == "down" else 1
        self.conv = SNConv2d(in_channels, out_channels, 3, stride=stride, spectral_norm=spectral_norm)

    @property
    def in_channels(self):
        return self.conv.in_channels

    @property
    def out_channels(self):
        return self.conv.out_channels

    def forward(self, x):
        if self.direction == "down" and (x.shape[-1] % 2 or x.shape[-2] % 2):
            raise ConfigurationError(f"down block received odd spatial size {tuple(x.shape[-2:])}")
        if self.direction == "up":
            x = upsample(x, self.upsample_mode)
        return _ACTIVATIONS[self.activation](self.conv(x))


def reset_parameters(module, seed):
    """Deterministically re-initialize every layer of ``module`` from ``seed``."""
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, AttentionAugmentedConv2d):
            m.reset_parameters(g)
        elif isinstance(m, SNConv2d) and not _inside_attention(module, m):
            m.reset_parameters(g)
    return module


def _inside_attention(root, conv):
    return any(isinstance(m, AttentionAugmentedConv2d) and m.conv is conv for m in root.modules())
