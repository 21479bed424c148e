import pytest
import torch

from densegan.discriminator import Discriminator, DiscriminatorConfig, build_discriminator
from densegan.errors import ConfigurationError, NonFiniteError, WiringError
from densegan.generator import GeneratorConfig, build_generator, grid_nodes
from _fd import check_gradients, randomize


class TestGeneratorConfig:
    @pytest.mark.parametrize("size", [48, 100, 0])
    def test_non_power_of_two_rejected(self, size):
        with pytest.raises(ConfigurationError):
            GeneratorConfig(input_size=size).validate()

    def test_bottleneck_extent(self):
        with pytest.raises(ConfigurationError):
            GeneratorConfig(input_size=32, depth=4).validate()
        GeneratorConfig(input_size=32, depth=3).validate()

    def test_channel_schedule(self):
        cfg = GeneratorConfig(input_size=256, depth=4, base_channels=64)
        assert [cfg.channels(i) for i in range(5)] == [64, 128, 256, 512, 512]
        assert GeneratorConfig(depth=4, latent_dim=100).channels(4) == 100


class TestSkipGrid:
    @pytest.mark.parametrize("depth", [1, 2, 3, 4])
    def test_node_count(self, depth):
        g = build_generator(GeneratorConfig(input_size=64, depth=depth, base_channels=4))
        assert len(g.nodes) == depth * (depth + 1) // 2 + depth + 1

    def test_columns_per_level(self):
        nodes = grid_nodes(4)
        assert sorted(j for i, j in nodes if i == 0) == [0, 1, 2, 3, 4]
        assert [j for i, j in nodes if i == 4] == [0]

    def test_depth_one_is_single_skip(self):
        g = build_generator(GeneratorConfig(input_size=16, depth=1, base_channels=4, input_channels=1))
        g(torch.randn(1, 1, 16, 16))
        assert g.last_arity == {(0, 0): 1, (1, 0): 1, (0, 1): 2}
        assert g.node(0, 1).in_channels == 4 + 8

    def test_concat_arithmetic(self):
        g = build_generator(GeneratorConfig(input_size=64, depth=4, base_channels=64))
        # j=1 at level 0: 64 same-level channels + 128 upsampled from level 1
        assert g.node(0, 1).in_channels == 64 + 128
        assert g.node(0, 2).in_channels == 2 * 64 + 128

    def test_arity_mismatch(self):
        g = build_generator(GeneratorConfig(input_size=16, depth=2, base_channels=2, input_channels=1))
        with pytest.raises(WiringError):
            g.dense_skip_node(0, 2, [torch.zeros(1, 2, 16, 16)], torch.zeros(1, 4, 8, 8))
        with pytest.raises(WiringError):
            g.dense_skip_node(0, 1, [torch.zeros(1, 2, 16, 16)], torch.zeros(1, 4, 16, 16))

    def test_zero_inputs_give_bias_driven_constant(self):
        g = build_generator(GeneratorConfig(input_size=16, depth=1, base_channels=2, input_channels=1)).eval()
        with torch.no_grad():
            g.node(0, 1).conv.bias.copy_(torch.tensor([0.5, -0.5]))
        out = g.dense_skip_node(0, 1, [torch.zeros(1, 2, 16, 16)], torch.zeros(1, 4, 8, 8))
        assert torch.all(out[0, 0] == 0.5) and torch.all(out[0, 1] == 0)


class TestGenerator:
    def test_output_shape_full_size(self):
        g = build_generator(GeneratorConfig(input_size=256, depth=4, base_channels=4))
        x = torch.rand(1, 3, 256, 256) * 2 - 1
        with torch.no_grad():
            y = g(x)
        assert y.shape == x.shape
        assert y.abs().max() <= 1

    def test_spatial_dims_per_level(self):
        g = build_generator(GeneratorConfig(input_size=32, depth=3, base_channels=4))
        _, nodes = g(torch.randn(2, 3, 32, 32), return_nodes=True)
        for (i, j), t in nodes.items():
            assert t.shape[-1] == 32 >> i

    def test_same_seed_bit_identical(self):
        cfg = GeneratorConfig(input_size=16, depth=2, base_channels=4)
        a, b = build_generator(cfg, seed=7), build_generator(cfg, seed=7)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)
        x = torch.randn(2, 3, 16, 16)
        assert torch.equal(a.eval()(x), b.eval()(x))
        c = build_generator(cfg, seed=8)
        assert not torch.equal(a.node(0, 0).conv.weight, c.node(0, 0).conv.weight)

    def test_wrong_input_shape(self):
        g = build_generator(GeneratorConfig(input_size=16, depth=2, base_channels=2))
        with pytest.raises(ConfigurationError):
            g(torch.randn(1, 3, 32, 32))

    def test_nan_names_node(self):
        g = build_generator(GeneratorConfig(input_size=16, depth=2, base_channels=2)).eval()
        with torch.no_grad():
            g.node(1, 1).conv.bias.fill_(float("nan"))
        with pytest.raises(NonFiniteError, match=r"\(1, 1\)"):
            g(torch.randn(1, 3, 16, 16))

    def test_gradients_match_finite_differences(self):
        g = randomize(build_generator(GeneratorConfig(input_size=16, depth=2, base_channels=2, input_channels=1)))
        x = (torch.rand(1, 1, 16, 16) * 2 - 1).requires_grad_()
        tensors = {"input": x, **dict(g.named_parameters())}
        errors = check_gradients(lambda: g(x).sum(), tensors, max_entries=40)
        assert max(errors.values()) < 1e-4, errors


class TestDiscriminator:
    def test_feature_map_shape(self):
        cfg = DiscriminatorConfig(input_size=256, depth=4, base_channels=8)
        d = build_discriminator(cfg)
        with torch.no_grad():
            out = d(torch.randn(1, 3, 256, 256))
        assert out.features.shape == (1, 64 * 16 * 16) == (1, cfg.feature_size)

    def test_probabilities_open_interval(self):
        d = randomize(build_discriminator(DiscriminatorConfig(input_size=16, depth=2, base_channels=8)), std=1.0)
        out = d(torch.randn(8, 3, 16, 16) * 3)
        assert torch.all((out.p_real > 0) & (out.p_real < 1))

    def test_deterministic_build_and_pure_forward(self):
        cfg = DiscriminatorConfig(input_size=16, depth=2, base_channels=8)
        a, b = build_discriminator(cfg, seed=3).eval(), build_discriminator(cfg, seed=3).eval()
        x = torch.randn(2, 3, 16, 16)
        assert torch.equal(a(x).features, b(x).features)
        assert torch.equal(a(x).features, a(x).features)

    def test_ablation_changes_only_penultimate(self):
        on = build_discriminator(DiscriminatorConfig(input_size=32, depth=2, base_channels=16))
        off = build_discriminator(DiscriminatorConfig(input_size=32, depth=2, base_channels=16, attention=False))
        shapes = lambda m: {k: v.shape for k, v in m.state_dict().items() if not k.startswith("penultimate")}
        assert shapes(on) == shapes(off)
        out = off(torch.randn(2, 3, 32, 32))
        assert out.features.shape == on(torch.randn(2, 3, 32, 32)).features.shape

    def test_attention_off_equals_pure_conv_stack(self):
        cfg = DiscriminatorConfig(input_size=16, depth=2, base_channels=4, attention=False)
        d = randomize(build_discriminator(cfg))
        act = lambda t: torch.nn.functional.leaky_relu(t, 0.2)
        x = torch.randn(3, 3, 16, 16)
        h = x
        for block in d.down:
            conv = block.conv
            h = act(torch.nn.functional.conv2d(h, conv.weight / conv.sigma, conv.bias, 2, 1))
        p = d.penultimate
        h = act(torch.nn.functional.conv2d(h, p.weight / p.sigma, p.bias, 1, 1))
        f = d.final
        logit = torch.nn.functional.conv2d(h, f.weight / f.sigma, f.bias, 1, 1).mean(dim=(1, 2, 3))
        out = d(x)
        torch.testing.assert_close(out.features, h.flatten(1))
        torch.testing.assert_close(out.p_real, torch.sigmoid(logit))

    def test_small_feature_map_rejected(self):
        with pytest.raises(ConfigurationError):
            DiscriminatorConfig(input_size=16, depth=3).validate()

    def test_attention_channel_mismatch(self):
        with pytest.raises(ConfigurationError):
            Discriminator(DiscriminatorConfig(input_size=16, depth=2, base_channels=2, n_heads=4, d_v=2))

    def test_gradients_match_finite_differences(self):
        d = randomize(build_discriminator(DiscriminatorConfig(input_size=16, depth=2, base_channels=4,
                                                              input_channels=1, n_heads=2, d_k=2, d_v=2)))
        x = torch.randn(2, 1, 16, 16, requires_grad=True)
        tensors = {"input": x, **dict(d.named_parameters())}
        fn = lambda: d(x).p_real.sum() + d(x).features.sum()
        errors = check_gradients(fn, tensors, max_entries=40)
        assert max(errors.values()) < 1e-4, errors
