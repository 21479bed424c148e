"""
Dense nested skips in the generator
===================================

Build a small generator, run one image through it and look at every grid
node: its spatial size, its channel count and how many tensors were
concatenated to form its input.
"""

# %%
import torch

from densegan.generator import GeneratorConfig, build_generator, grid_nodes

cfg = GeneratorConfig(input_size=64, input_channels=3, depth=3, base_channels=8)
g = build_generator(cfg).eval()
print(g)

# %%
# Node (i, j) sits at level i (resolution 64 / 2**i). Encoder nodes (j = 0)
# read one tensor; every other node concatenates its j same-level
# predecessors with the upsampled output of node (i + 1, j - 1).
x = torch.rand(1, 3, 64, 64) * 2 - 1
with torch.no_grad():
    x_hat, nodes = g(x, return_nodes=True)

for i, j in grid_nodes(cfg.depth):
    print(f"node ({i},{j})  shape {tuple(nodes[(i, j)].shape[1:])}  inputs {g.last_arity[(i, j)]}")

# %%
# The reconstruction has the input's shape and lies in [-1, 1].
print(x_hat.shape, float(x_hat.min()), float(x_hat.max()))
