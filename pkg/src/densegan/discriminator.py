"""Real/fake discriminator that also exposes its final feature map f(x)."""

from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import torch
from torch import nn

from .errors import ConfigurationError, NonFiniteError
from .layers import AttentionAugmentedConv2d, ConvBlock, SNConv2d, _ACTIVATIONS, reset_parameters


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_size: int = 256
    input_channels: int = 3
    depth: int = 4
    base_channels: int = 64
    max_channels: int = 512
    attention: bool = True
    n_heads: int = 4
    d_k: Optional[int] = None
    d_v: Optional[int] = None
    spectral_norm: bool = True
    activation: str = "leaky_relu"

    def validate(self):
        if self.depth < 1:
            raise ConfigurationError("discriminator depth must be at least 1")
        if self.input_size % 2 ** self.depth or self.input_size >> self.depth < 4:
            raise ConfigurationError(
                f"input_size {self.input_size} with depth {self.depth} must leave a final "
                f"feature map of at least 4x4")
        if self.activation not in ("relu", "leaky_relu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        return self

    def channels(self, level):
        return min(self.base_channels * 2 ** level, self.max_channels)

    @property
    def feature_channels(self):
        return self.channels(self.depth - 1)

    @property
    def feature_size(self):
        side = self.input_size >> self.depth
        return self.feature_channels * side * side

    def to_dict(self):
        return asdict(self)


class DiscriminatorOutput(NamedTuple):
    p_real: torch.Tensor  # (B,)
    features: torch.Tensor  # (B, feature_size)
    logits: torch.Tensor  # (B,)


class Discriminator(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config.validate()
        sn = config.spectral_norm
        blocks = []
        c_in = config.input_channels
        for k in range(config.depth):
            blocks.append(ConvBlock(c_in, config.channels(k), "down", config.activation, spectral_norm=sn))
            c_in = config.channels(k)
        self.down = nn.ModuleList(blocks)
        c = config.feature_channels
        if config.attention:
            self.penultimate = AttentionAugmentedConv2d(c, c, config.n_heads, config.d_k, config.d_v,
                                                        spectral_norm=sn)
        else:
            self.penultimate = SNConv2d(c, c, 3, spectral_norm=sn)
        self.final = SNConv2d(c, 1, 3, spectral_norm=sn)

    def forward(self, x):
        cfg = self.config
        expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
        if tuple(x.shape[1:]) != expected:
            raise ConfigurationError(f"discriminator expects inputs of shape (B, {expected}), got {tuple(x.shape)}")
        act = _ACTIVATIONS[cfg.activation]
        h = x
        for k, block in enumerate(self.down):
            h = block(h)
            _check(h, f"discriminator down block {k}")
        feat = act(self.penultimate(h))
        _check(feat, "discriminator penultimate stage")
        logits = self.final(feat).mean(dim=(1, 2, 3))
        _check(logits, "discriminator head")
        return DiscriminatorOutput(torch.sigmoid(logits), feat.flatten(1), logits)

    def features(self, x):
        return self.forward(x).features


def _check(t, where):
    if not torch.isfinite(t).all():
        raise NonFiniteError(where)


def build_discriminator(config, seed=1):
    """Construct a :class:`Discriminator` with weights drawn deterministically from ``seed``."""
    return reset_parameters(Discriminator(config), seed)
