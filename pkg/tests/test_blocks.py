import numpy as np
import pytest
import torch

from lesionseg.blocks import (BlockConfig, ConvNext3d, DownConvNext3d, OutputHead, Stem,
                              count_parameters)
from lesionseg.segmenter import SegModelConfig, SegmenterNet

CFG8 = BlockConfig(base_width=8)


class TestStem:
    @pytest.mark.parametrize("in_channels,size", [(3, 16), (1, 16), (3, 8)])
    def test_expands_channels_preserves_space(self, in_channels, size):
        stem = Stem(in_channels, CFG8)
        x = torch.randn(1, in_channels, size, size, size)
        y = stem(x)
        assert y.shape == (1, 8, size, size, size)

    def test_channel_mismatch_rejected(self):
        stem = Stem(3, CFG8)
        with pytest.raises(ValueError):
            stem(torch.randn(1, 2, 8, 8, 8))


class TestConvNext:
    def test_zeroed_projection_gives_exact_identity(self):
        block = ConvNext3d(8, CFG8)
        with torch.no_grad():
            block.pw2.weight.zero_()
            block.pw2.bias.zero_()
        x = torch.randn(2, 8, 6, 6, 6)
        with torch.no_grad():
            np.testing.assert_array_equal(block(x).numpy(), x.numpy())

    def test_shape_preserved(self):
        block = ConvNext3d(8, CFG8)
        x = torch.randn(1, 8, 10, 10, 10)
        assert block(x).shape == x.shape

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        block = ConvNext3d(2, BlockConfig(base_width=2, gn_groups=2, expansion=2)).double()
        x = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64, requires_grad=True)
        block(x).sum().backward()
        analytic = x.grad.clone()
        numeric = torch.zeros_like(x)
        h = 1e-6
        flat = x.data.view(-1)
        nf = numeric.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = block(x).sum().item()
                flat[i] = orig - h
                dn = block(x).sum().item()
                flat[i] = orig
                nf[i] = (up - dn) / (2 * h)
        rel = (analytic - numeric).norm() / numeric.norm()
        assert rel < 1e-4


class TestDownConvNext:
    @pytest.mark.parametrize("c,size", [(8, 8), (16, 6)])
    def test_halves_space_doubles_channels(self, c, size):
        cfg = BlockConfig(base_width=8)
        down = DownConvNext3d(c, cfg)
        x = torch.randn(1, c, size, size, size)
        y = down(x)
        assert y.shape == (1, 2 * c, size // 2, size // 2, size // 2)

    def test_odd_dims_rejected(self):
        down = DownConvNext3d(8, CFG8)
        with pytest.raises(ValueError):
            down(torch.randn(1, 8, 7, 8, 8))


class TestOutputHead:
    @pytest.mark.parametrize("depth,width", [(1, 32), (3, 128), (4, 256)])
    def test_head_widths_follow_depth_rule(self, depth, width):
        cfg = BlockConfig(base_width=32)
        assert cfg.width_at(depth) == width
        head = OutputHead(width, 2)
        y = head(torch.randn(1, width, 4, 4, 4))
        assert y.shape == (1, 2, 4, 4, 4)


class TestGolden:
    def test_parameter_counts_are_frozen(self):
        # pure function of (C, depth, expansion, in_channels)
        c32 = BlockConfig(base_width=32)
        assert count_parameters(SegmenterNet(SegModelConfig(in_channels=3, blocks=c32))) \
            == 9_003_168
        assert count_parameters(SegmenterNet(SegModelConfig(in_channels=1, blocks=c32))) \
            == 9_001_440
        c16 = BlockConfig(base_width=16)
        assert count_parameters(SegmenterNet(SegModelConfig(in_channels=3, blocks=c16))) \
            == 2_283_416

    def test_blocks_deterministic_in_eval_mode(self):
        torch.manual_seed(0)
        block = ConvNext3d(8, CFG8).eval()
        x = torch.randn(1, 8, 6, 6, 6)
        with torch.no_grad():
            a = block(x)
            b = block(x)
        np.testing.assert_array_equal(a.numpy(), b.numpy())
