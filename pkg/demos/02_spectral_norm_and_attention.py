"""
Spectral normalization and the attention-augmented convolution
==============================================================

Power iteration tracks the largest singular value of a kernel. Each
training-mode forward of ``SNConv2d`` advances it by one step, so the
estimate converges over the first few calls.
"""

# %%
import numpy as np
import torch

from densegan.discriminator import DiscriminatorConfig, build_discriminator
from densegan.layers import AttentionAugmentedConv2d, SNConv2d

torch.manual_seed(0)
conv = SNConv2d(16, 32).train()
with torch.no_grad():
    conv.weight.normal_()
    x = torch.randn(1, 16, 8, 8)
    for step in range(1, 31):
        conv(x)
        if step in (1, 2, 5, 10, 30):
            w = conv.normalized_weight().reshape(32, -1).numpy()
            print(f"after {step:2d} calls: largest singular value {np.linalg.svd(w, compute_uv=False)[0]:.5f}")

# %%
# The attention-augmented conv splits its output into a conv branch and
# n_heads * d_v self-attention channels computed over all positions.
aac = AttentionAugmentedConv2d(16, 32, n_heads=4)
out, weights = aac(torch.randn(2, 16, 8, 8), return_weights=True)
print("output", tuple(out.shape), "conv channels", aac.conv_channels, "attention weights", tuple(weights.shape))
print("rows sum to one:", torch.allclose(weights.sum(-1), torch.ones(())))

# %%
# In the discriminator the attention block sits just before the last conv.
# Its two outputs are the real probability and the pooled feature vector.
d = build_discriminator(DiscriminatorConfig(input_size=64, input_channels=3, depth=4, base_channels=16)).eval()
with torch.no_grad():
    res = d(torch.rand(4, 3, 64, 64) * 2 - 1)
print("p_real", res.p_real.numpy().round(3), "features", tuple(res.features.shape))
