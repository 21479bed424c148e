"""Encoder-decoder generator joined by nested dense skip pathways.

Node ``x[i, j]`` lives at level ``i`` (spatial size ``input_size / 2**i``)
and column ``j``. Column 0 is the encoder; every node with ``j > 0``
concatenates all earlier nodes of its level with the upsampled node
``x[i + 1, j - 1]`` and applies one conv block. The reconstruction is read
from ``x[0, L]`` through a 1x1 conv and tanh.
"""

from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import nn

from .errors import ConfigurationError, NonFiniteError, WiringError
from .layers import ConvBlock, SNConv2d, reset_parameters, upsample


def _is_power_of_two(n):
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class GeneratorConfig:
    input_size: int = 256
    input_channels: int = 3
    depth: int = 4
    base_channels: int = 64
    latent_dim: Optional[int] = None
    max_channels: int = 512
    spectral_norm: bool = True
    upsample_mode: str = "nearest"

    def validate(self):
        if not _is_power_of_two(self.input_size):
            raise ConfigurationError(f"input_size must be a power of two, got {self.input_size}")
        if self.input_channels not in (1, 3):
            raise ConfigurationError(f"input_channels must be 1 or 3, got {self.input_channels}")
        if self.depth < 1:
            raise ConfigurationError("generator depth must be at least 1")
        if self.input_size >> self.depth < 4:
            raise ConfigurationError(
                f"input_size {self.input_size} with depth {self.depth} leaves a bottleneck "
                f"smaller than 4x4")
        if self.base_channels < 1 or (self.latent_dim is not None and self.latent_dim < 1):
            raise ConfigurationError("channel counts must be positive")
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ConfigurationError(f"unknown upsample_mode {self.upsample_mode!r}")
        return self

    def channels(self, level):
        if level == self.depth and self.latent_dim is not None:
            return self.latent_dim
        return min(self.base_channels * 2 ** level, self.max_channels)

    def to_dict(self):
        return asdict(self)


def grid_nodes(depth):
    """All ``(i, j)`` indices of the skip grid, in evaluation order."""
    return [(i, j) for j in range(depth + 1) for i in range(depth + 1 - j)]


def _key(i, j):
    return f"x{i}_{j}"


class Generator(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config.validate()
        L = config.depth
        relu_block = dict(activation="relu", spectral_norm=config.spectral_norm,
                          upsample_mode=config.upsample_mode)
        nodes = {}
        for i, j in grid_nodes(L):
            c = config.channels(i)
            if j == 0:
                c_in = config.input_channels if i == 0 else config.channels(i - 1)
                direction = "same" if i == 0 else "down"
            else:
                c_in = j * c + config.channels(i + 1)
                direction = "same"
            nodes[_key(i, j)] = ConvBlock(c_in, c, direction, **relu_block)
        self.nodes = nn.ModuleDict(nodes)
        self.head = SNConv2d(config.channels(0), config.input_channels, kernel_size=1,
                             spectral_norm=config.spectral_norm)
        self.last_arity = {}

    def node(self, i, j):
        return self.nodes[_key(i, j)]

    def dense_skip_node(self, i, j, same_level_outputs, below_output):
        """Evaluate node ``(i, j)`` for ``j >= 1`` from its ``j`` same-level
        predecessors and the output of node ``(i + 1, j - 1)``."""
        if j < 1:
            raise WiringError(f"dense_skip_node called for encoder node ({i}, {j})")
        if len(same_level_outputs) != j:
            raise WiringError(f"node ({i}, {j}) expects {j} same-level inputs, got {len(same_level_outputs)}")
        size = same_level_outputs[0].shape[-2:]
        if any(t.shape[-2:] != size for t in same_level_outputs):
            raise WiringError(f"node ({i}, {j}) same-level inputs disagree in spatial size")
        if tuple(below_output.shape[-2:]) != (size[0] // 2, size[1] // 2):
            raise WiringError(
                f"node ({i}, {j}) below input has spatial size {tuple(below_output.shape[-2:])}, "
                f"expected half of {tuple(size)}")
        inputs = list(same_level_outputs) + [upsample(below_output, self.config.upsample_mode)]
        self.last_arity[(i, j)] = len(inputs)
        return self.node(i, j)(torch.cat(inputs, dim=1))

    def forward(self, x, return_nodes=False):
        cfg = self.config
        expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
        if tuple(x.shape[1:]) != expected:
            raise ConfigurationError(f"generator expects inputs of shape (B, {expected}), got {tuple(x.shape)}")
        out = {}
        self.last_arity = {}
        for i, j in grid_nodes(cfg.depth):
            if j == 0:
                src = x if i == 0 else out[(i - 1, 0)]
                self.last_arity[(i, 0)] = 1
                y = self.node(i, 0)(src)
            else:
                y = self.dense_skip_node(i, j, [out[(i, k)] for k in range(j)], out[(i + 1, j - 1)])
            if not torch.isfinite(y).all():
                raise NonFiniteError(f"generator node ({i}, {j})")
            out[(i, j)] = y
        x_hat = torch.tanh(self.head(out[(0, cfg.depth)]))
        if return_nodes:
            return x_hat, out
        return x_hat

    def encode(self, x):
        """Bottleneck representation ``x[L, 0]``."""
        h = x
        for i in range(self.config.depth + 1):
            h = self.node(i, 0)(h)
        return h


def build_generator(config, seed=0):
    """Construct a :class:`Generator` with weights drawn deterministically from ``seed``."""
    return reset_parameters(Generator(config), seed)
