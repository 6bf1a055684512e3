"""Forward semantics and differentiability of the normalization layers.

Expected values in the exactness tests were computed by hand from the
four-element probe (mean 4, population variance 5).
"""

import math

import pytest
import torch

from fdgan.errors import ConfigError, NumericsError
from fdgan.norm import (
    EPS_DEFAULT,
    AdaptiveInstanceNorm,
    AdditiveInstanceNorm,
    ConditionTransform,
    InstanceNorm,
    adain,
    addin,
    channel_stats,
    grad_check,
    instance_norm,
)


def probe_map():
    # one sample, one channel: [[1,3],[5,7]]
    return torch.tensor([[[[1.0, 3.0], [5.0, 7.0]]]])


class TestChannelStats:
    def test_direct_arithmetic(self):
        mu, sigma = channel_stats(probe_map(), eps=1e-5)
        assert mu.shape == (1, 1) and sigma.shape == (1, 1)
        assert abs(mu.item() - 4.0) < 1e-6
        assert abs(sigma.item() - math.sqrt(5 + 1e-5)) < 1e-6

    def test_constant_input(self):
        x = torch.full((1, 1, 2, 2), 2.0)
        mu, sigma = channel_stats(x, eps=1e-5)
        assert abs(mu.item() - 2.0) < 1e-7
        assert abs(sigma.item() - math.sqrt(1e-5)) < 1e-9

    def test_shift_equivariance(self):
        x1 = torch.randn(1, 3, 4, 4)
        x = torch.cat([x1, x1 + 10.0], dim=0)
        mu, sigma = channel_stats(x)
        assert torch.allclose(mu[1], mu[0] + 10.0, atol=1e-5)
        assert torch.allclose(sigma[1], sigma[0], atol=1e-5)

    def test_batch_permutation_equivariance(self):
        x = torch.randn(4, 3, 5, 5)
        perm = torch.tensor([2, 0, 3, 1])
        mu, sigma = channel_stats(x)
        mu_p, sigma_p = channel_stats(x[perm])
        assert torch.equal(mu_p, mu[perm])
        assert torch.equal(sigma_p, sigma[perm])

    def test_rejects_non_finite(self):
        x = torch.zeros(1, 2, 2, 2)
        x[0, 1, 0, 1] = float("nan")
        with pytest.raises(NumericsError, match=r"\(0, 1, 0, 1\)"):
            channel_stats(x)


class TestInstanceNorm:
    def test_direct_arithmetic(self):
        out = instance_norm(probe_map(), torch.ones(1), torch.zeros(1), eps=1e-5)
        expected = torch.tensor([[[[-1.34163, -0.44721], [0.44721, 1.34163]]]])
        assert torch.allclose(out, expected, atol=1e-5)

    def test_zero_weight(self):
        x = torch.randn(2, 3, 4, 4)
        out = instance_norm(x, torch.zeros(3), torch.full((3,), 5.0))
        assert torch.allclose(out, torch.full_like(out, 5.0))

    def test_normalization_identity(self):
        torch.manual_seed(0)
        x = torch.randn(3, 4, 8, 8) * 3 + 1
        gamma = torch.tensor([1.0, -2.0, 0.5, 3.0])
        beta = torch.tensor([0.0, 1.0, -1.0, 2.0])
        out = instance_norm(x, gamma, beta)
        out_mean = out.mean(dim=(2, 3))
        out_std = out.std(dim=(2, 3), unbiased=False)
        for c in range(4):
            assert torch.allclose(out_mean[:, c], beta[c].expand(3), atol=1e-4)
            assert torch.allclose(out_std[:, c], gamma[c].abs().expand(3), atol=1e-2)

    def test_channel_mismatch(self):
        with pytest.raises(ConfigError):
            instance_norm(torch.randn(1, 3, 2, 2), torch.ones(4), torch.zeros(4))

    def test_module_matches_functional(self):
        m = InstanceNorm(3)
        x = torch.randn(2, 3, 4, 4)
        assert torch.equal(m(x), instance_norm(x, m.weight, m.bias))


class TestAdain:
    def test_self_style_is_identity(self):
        torch.manual_seed(1)
        x = torch.randn(2, 3, 6, 6)
        assert (adain(x, x) - x).abs().max() < 1e-4

    def test_unit_style_equals_plain_norm(self):
        torch.manual_seed(2)
        x = torch.randn(2, 3, 5, 5)
        # build y with per-channel mean 0, std 1
        y = torch.randn(2, 3, 8, 8)
        mu, sigma = channel_stats(y, eps=0.0)
        y = (y - mu[:, :, None, None]) / sigma[:, :, None, None]
        out = adain(x, y)
        ref = instance_norm(x, torch.ones(3), torch.zeros(3))
        assert torch.allclose(out, ref, atol=1e-4)

    def test_constant_shift_style(self):
        x = probe_map()
        y = torch.tensor([[[[0.0, 2.0], [4.0, 6.0]]]])
        out = adain(x, y)
        assert torch.allclose(out, y, atol=1e-5)

    def test_batch_mismatch(self):
        with pytest.raises(ConfigError):
            adain(torch.randn(2, 3, 4, 4), torch.randn(3, 3, 4, 4))


class TestAddin:
    def make_layer(self, cond_dim=5, channels=1):
        return AdditiveInstanceNorm(cond_dim, channels)

    def freeze_to_constant(self, layer, value):
        with torch.no_grad():
            for p in layer.transform.parameters():
                p.zero_()
            layer.transform.fc2.bias.fill_(value)

    def test_zero_bias_equals_plain_norm(self):
        layer = self.make_layer(channels=3)
        self.freeze_to_constant(layer, 0.0)
        x = torch.randn(2, 3, 4, 4)
        cond = torch.randn(2, 5)
        ref = instance_norm(x, torch.ones(3), torch.zeros(3))
        assert torch.allclose(layer(x, cond), ref, atol=1e-6)

    def test_unit_bias(self):
        layer = self.make_layer()
        self.freeze_to_constant(layer, 1.0)
        out = layer(probe_map(), torch.randn(1, 5))
        expected = torch.tensor([[[[-0.34163, 0.55279], [1.44721, 2.34163]]]])
        assert torch.allclose(out, expected, atol=1e-5)

    def test_bias_equivalence_with_adain(self):
        # construct a style map with unit deviation and mean equal to the
        # transform output; the additive layer must match the adaptive one
        torch.manual_seed(3)
        for _ in range(20):
            layer = AdditiveInstanceNorm(4, 3)
            x = torch.randn(2, 3, 6, 6)
            cond = torch.randn(2, 4)
            bias = layer.transform(cond).detach()
            h = w = 16
            base = torch.randn(h * w)
            base = (base - base.mean()) / base.std(unbiased=False)
            base = base * math.sqrt(1.0 - EPS_DEFAULT)  # counter the eps inside sigma
            y = base.view(1, 1, h, w) + bias[:, :, None, None]
            assert (adain(x, y) - layer(x, cond)).abs().max() < 1e-5

    def test_scale_and_shift_invariance(self):
        torch.manual_seed(4)
        layer = self.make_layer(channels=3)
        x = torch.randn(2, 3, 8, 8)
        cond = torch.randn(2, 5)
        a = torch.tensor([0.5, 2.0, 7.0]).view(1, 3, 1, 1)
        b = torch.tensor([-1.0, 0.0, 3.0]).view(1, 3, 1, 1)
        out1 = layer(x, cond)
        out2 = layer(a * x + b, cond)
        assert (out1 - out2).abs().max() < 1e-4

    def test_dimension_mismatch(self):
        layer = self.make_layer(cond_dim=5, channels=2)
        with pytest.raises(ConfigError):
            layer(torch.randn(1, 3, 4, 4), torch.randn(1, 5))
        with pytest.raises(ConfigError):
            layer(torch.randn(1, 2, 4, 4), torch.randn(1, 6))


class TestConditionTransform:
    def test_hidden_size_rule(self):
        t = ConditionTransform(8, 4)
        assert t.hidden_dim == 6
        assert ConditionTransform(1, 1).hidden_dim == 1

    def test_zero_map(self):
        t = ConditionTransform(3, 4)
        with torch.no_grad():
            for p in t.parameters():
                p.zero_()
        out = t(torch.randn(5, 3))
        assert out.shape == (5, 4)
        assert torch.equal(out, torch.zeros(5, 4))

    def test_identity_on_positives(self):
        t = ConditionTransform(1, 1)
        with torch.no_grad():
            t.fc1.weight.fill_(1.0)
            t.fc1.bias.zero_()
            t.fc2.weight.fill_(1.0)
            t.fc2.bias.zero_()
        out = t(torch.tensor([[2.0]]))
        assert abs(out.item() - 2.0) < 1e-6

    def test_input_mismatch(self):
        with pytest.raises(ConfigError):
            ConditionTransform(3, 4)(torch.randn(2, 5))


class TestGradChecks:
    @pytest.mark.parametrize("op", ["instance_norm", "adain", "addin", "condition_transform"])
    def test_finite_difference_agreement(self, op):
        assert grad_check(op, seed=0) < 1e-4

    def test_unknown_op(self):
        with pytest.raises(ConfigError):
            grad_check("softmax")


class TestRandomizedProperties:
    def test_normalization_exactness_sweep(self):
        # per-channel mean ~ 0 and std ~ 1 whenever spatial variance is well
        # above the stabilizer
        gen = torch.Generator().manual_seed(99)
        ones, zeros = torch.ones(1), torch.zeros(1)
        for _ in range(200):
            b = int(torch.randint(1, 4, (1,), generator=gen))
            c = int(torch.randint(1, 8, (1,), generator=gen))
            h = int(torch.randint(2, 16, (1,), generator=gen))
            w = int(torch.randint(2, 16, (1,), generator=gen))
            x = torch.randn(b, c, h, w, generator=gen) * 2.0
            var = x.var(dim=(2, 3), unbiased=False)
            if (var <= 10 * EPS_DEFAULT).any():
                continue
            out = instance_norm(x, torch.ones(c), torch.zeros(c))
            assert out.mean(dim=(2, 3)).abs().max() < 1e-4
            assert (out.std(dim=(2, 3), unbiased=False) - 1).abs().max() < 1e-2

    def test_addin_equal_after_normalization(self):
        # two inputs that agree after per-channel standardization get the
        # same output
        torch.manual_seed(7)
        layer = AdditiveInstanceNorm(4, 2)
        cond = torch.randn(3, 4)
        x1 = torch.randn(3, 2, 5, 5)
        x2 = x1 * 3.5 - 2.0
        assert (layer(x1, cond) - layer(x2, cond)).abs().max() < 1e-4


class TestAdaptiveInstanceNorm:
    def test_near_identity_at_zero_transform(self):
        layer = AdaptiveInstanceNorm(4, 3)
        with torch.no_grad():
            for p in layer.transform.parameters():
                p.zero_()
        x = torch.randn(2, 3, 4, 4)
        out = layer(x, torch.randn(2, 4))
        ref = instance_norm(x, torch.ones(3), torch.zeros(3))
        assert torch.allclose(out, ref, atol=1e-6)

    def test_has_scale_path(self):
        layer = AdaptiveInstanceNorm(4, 3)
        assert layer.transform.output_dim == 6
